"""Comparison methods that share the agent's recognition pipeline.

RandomOneView, RandomMultiView and LargestMultiView are the meta pipeline
with the view-selection part replaced (one glimpse, uniform moves, always the
largest move).  Their encoder, RNN and classifier are still meta-trained, so
the comparison isolates the value of a learned policy.

PretrainFinetune trains one conventional classifier over every MetaTrain and
MetaValidation category, then swaps in a fresh N-way head and finetunes on
each test task's support set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import fresh_head, init_params, rollout_batch
from .errors import ConfigError
from .losses import LossWeights, batch_loss
from .meta import (TAG_PRETRAIN, TAG_TEST, Adam, MetaConfig, SplitSpec, Task, TestReport,
                   TrainResult, evaluate_task, mean_ci95, run_meta_test, run_meta_training,
                   stream, validation_tasks)

METHODS = ("metaview", "random-one", "random-multi", "largest", "pretrain-finetune")


def method_config(method: str, cfg: MetaConfig) -> MetaConfig:
    """The meta configuration a method trains and evaluates with."""
    if method == "metaview":
        return cfg.replace(policy="learned")
    if method == "random-one":
        return cfg.replace(T=1, policy="learned")
    no_policy = LossWeights(0.0, 0.0, cfg.weights.entropy_form)
    if method == "random-multi":
        return cfg.replace(policy="uniform", weights=no_policy)
    if method == "largest":
        return cfg.replace(policy="largest", weights=no_policy)
    raise ConfigError(f"unknown meta method {method!r} (choose from {METHODS[:-1]})")


def _rng(cfg, rng):
    return stream(cfg.seed, TAG_TEST, 2) if rng is None else rng


def random_one_view(theta, task: Task, cfg: MetaConfig, rng=None) -> float:
    return evaluate_task(theta, task, method_config("random-one", cfg), _rng(cfg, rng))


def random_multi_view(theta, task: Task, cfg: MetaConfig, rng=None) -> float:
    return evaluate_task(theta, task, method_config("random-multi", cfg), _rng(cfg, rng))


def largest_multi_view(theta, task: Task, cfg: MetaConfig, rng=None) -> float:
    return evaluate_task(theta, task, method_config("largest", cfg), _rng(cfg, rng))


def train_method(method: str, dataset, splits: SplitSpec, cfg: MetaConfig, **kw) -> TrainResult:
    return run_meta_training(dataset, splits, method_config(method, cfg), **kw)


def test_method(method: str, theta, dataset, splits: SplitSpec, cfg: MetaConfig,
                num_tasks: int | None = None) -> TestReport:
    return run_meta_test(theta, dataset, splits, method_config(method, cfg), num_tasks)


@dataclass
class FinetuneConfig:
    pretrain_iters: int = 400
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    finetune_steps: int = 400
    finetune_lr: float = 1e-2


@dataclass
class PretrainResult:
    theta: dict
    train_acc: float            # accuracy over all pretraining categories, argmax rollouts
    report: TestReport


def pretrain(dataset, splits: SplitSpec, cfg: MetaConfig, ft: FinetuneConfig):
    """Conventional training of the whole agent on train+val categories as one problem."""
    cats = list(splits.meta_train) + list(splits.meta_val)
    label_of = {c: k for k, c in enumerate(cats)}
    pool = np.array([i for c in cats for i in dataset.instances_of(c)])
    g = dataset.geometry
    action_set = cfg.action_set()
    theta = init_params(stream(cfg.seed, TAG_PRETRAIN, 0),
                        cfg.dims(g.feature_dim, num_classes=len(cats)))
    opt = Adam(ft.pretrain_lr)
    for it in range(ft.pretrain_iters):
        rng = stream(cfg.seed, TAG_PRETRAIN, 1, it)
        idx = rng.choice(pool, ft.pretrain_batch)
        labels = [label_of[int(dataset.category_ids[i])] for i in idx]
        starts = np.stack([rng.integers(g.elevations, size=len(idx)),
                           rng.integers(g.azimuths, size=len(idx))], axis=1)
        batch = rollout_batch(theta, dataset.features[idx], labels, starts, cfg.T, action_set,
                              mode="sample", rng=rng)
        parts = batch_loss(batch, cfg.weights)
        theta = opt.step(theta, batch.tape.backward(parts.total))
    rng = stream(cfg.seed, TAG_PRETRAIN, 2)
    starts = np.stack([rng.integers(g.elevations, size=len(pool)),
                       rng.integers(g.azimuths, size=len(pool))], axis=1)
    labels = [label_of[int(dataset.category_ids[i])] for i in pool]
    batch = rollout_batch(theta, dataset.features[pool], labels, starts, cfg.T, action_set,
                          mode="argmax")
    return theta, float(batch.rewards.mean())


def finetune_task(theta, task: Task, cfg: MetaConfig, ft: FinetuneConfig,
                  rng: np.random.Generator) -> float:
    """Fresh N-way head, ``finetune_steps`` SGD steps on the support set, query accuracy."""
    action_set = cfg.action_set()
    theta = fresh_head(rng, theta, cfg.N)
    fs, ls, ss = task.phase("support")
    for _ in range(ft.finetune_steps):
        batch = rollout_batch(theta, fs, ls, ss, cfg.T, action_set, mode="sample", rng=rng)
        grads = batch.tape.backward(batch_loss(batch, cfg.weights).total)
        theta = {k: theta[k] - ft.finetune_lr * grads[k] for k in theta}
    fq, lq, sq = task.phase("query")
    batch = rollout_batch(theta, fq, lq, sq, cfg.T, action_set, mode="argmax")
    return float(batch.rewards.mean())


def pretrain_finetune(dataset, splits: SplitSpec, cfg: MetaConfig,
                      ft: FinetuneConfig | None = None,
                      num_tasks: int | None = None) -> PretrainResult:
    """Transfer baseline; category-level tasks only."""
    if cfg.family != "category":
        raise ConfigError("pretrain-finetune is defined for the category family only")
    ft = ft or FinetuneConfig()
    theta, train_acc = pretrain(dataset, splits, cfg, ft)
    num_tasks = cfg.test_tasks if num_tasks is None else num_tasks
    tasks = validation_tasks(dataset, splits, cfg, phase="test", count=num_tasks, tag=TAG_TEST)
    accs = np.array([finetune_task(theta, t, cfg, ft, stream(cfg.seed, TAG_TEST, 3, j))
                     for j, t in enumerate(tasks)])
    mean, ci = mean_ci95(accs)
    return PretrainResult(theta, train_acc, TestReport(mean, ci, num_tasks, accs, cfg.echo()))
