"""Gradient-based meta-learning over N-way K-shot active-recognition tasks.

The MAML machinery (:func:`adapt`, :func:`meta_gradient`, :func:`outer_step`)
is written against a small objective interface so it can be exercised on
closed-form problems as well as on the agent.  :class:`AgentObjective` is
the real thing: Eq.-4-style episode losses over batched rollouts.

Randomness is never shared across tasks.  Every task, rollout and sampler
gets its own generator derived from ``(seed, tag, epoch, iteration, index)``
so results do not depend on execution order.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .agent import AgentDims, ParamSet, init_params, rollout_batch
from .env import ActionSet, Dataset, ObjectInstance, ViewPointer
from .errors import ConfigError, ContractError, NumericError, SamplingError
from .losses import LossWeights, batch_loss

log = logging.getLogger(__name__)

FAMILIES = ("category", "intra_instance", "inter_instance")
OPTIMIZERS = ("sgd", "adam")

# stream tags for derived generators
TAG_SPLIT, TAG_INIT, TAG_TRAIN, TAG_VAL, TAG_TEST, TAG_PRETRAIN = 11, 12, 13, 14, 15, 16

METRIC_COLUMNS = ("epoch", "meta_train_loss", "meta_train_acc", "val_acc_mean", "val_acc_std",
                  "mean_policy_entropy", "wall_seconds")


def stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class Task:
    support: list[tuple[ObjectInstance, int]]
    query: list[tuple[ObjectInstance, int]]
    family: str
    support_views: list[ViewPointer]
    query_views: list[ViewPointer]

    def phase(self, which: str):
        """``(features (B,E,A,D), labels (B,), starts (B,2))`` for ``support``/``query``."""
        pairs = self.support if which == "support" else self.query
        views = self.support_views if which == "support" else self.query_views
        feats = np.stack([o.grid.features for o, _ in pairs])
        labels = np.array([y for _, y in pairs], dtype=np.int64)
        return feats, labels, np.array(views, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint label sets per phase: category ids, or object ids for intra-instance."""
    meta_train: tuple[int, ...]
    meta_val: tuple[int, ...]
    meta_test: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.meta_train), set(self.meta_val), set(self.meta_test)
        if a & b or a & c or b & c:
            raise ConfigError("meta-train/val/test label sets overlap")

    def labels(self, phase: str) -> tuple[int, ...]:
        return {"train": self.meta_train, "val": self.meta_val, "test": self.meta_test}[phase]


def make_splits(dataset: Dataset, family: str, counts: Sequence[int] | None = None,
                seed: int = 0) -> SplitSpec:
    """Random disjoint split of categories (or instances, for ``intra_instance``).

    Default counts follow 24/6/10 categories or a 400/126/200 instance ratio,
    scaled to what the dataset has.
    """
    if family not in FAMILIES:
        raise ConfigError(f"unknown task family {family!r}")
    pool = (np.arange(len(dataset)) if family == "intra_instance"
            else np.array(dataset.categories))
    if counts is None:
        ratio = (400, 126, 200) if family == "intra_instance" else (24, 6, 10)
        n = len(pool)
        tr = int(round(n * ratio[0] / sum(ratio)))
        va = int(round(n * ratio[1] / sum(ratio)))
        counts = (tr, va, n - tr - va)
    if sum(counts) > len(pool) or min(counts) < 1:
        raise ConfigError(f"split counts {tuple(counts)} do not fit {len(pool)} labels")
    perm = stream(seed, TAG_SPLIT).permutation(pool)
    tr, va, te = counts
    return SplitSpec(tuple(sorted(int(x) for x in perm[:tr])),
                     tuple(sorted(int(x) for x in perm[tr:tr + va])),
                     tuple(sorted(int(x) for x in perm[tr + va:tr + va + te])))


def _random_views(rng, dataset, n) -> list[ViewPointer]:
    g = dataset.geometry
    cells = rng.integers(g.num_cells, size=n)
    return [ViewPointer(int(c) // g.azimuths, int(c) % g.azimuths) for c in cells]


def _distinct_views(rng, dataset, n_inst, per_inst) -> list[list[ViewPointer]]:
    g = dataset.geometry
    if per_inst > g.num_cells:
        raise SamplingError(f"cannot give {per_inst} distinct initial views on a "
                            f"{g.num_cells}-cell grid")
    if n_inst * per_inst <= g.num_cells:
        cells = rng.choice(g.num_cells, n_inst * per_inst, replace=False).reshape(n_inst, per_inst)
    else:
        cells = np.stack([rng.choice(g.num_cells, per_inst, replace=False) for _ in range(n_inst)])
    return [[ViewPointer(int(c) // g.azimuths, int(c) % g.azimuths) for c in row] for row in cells]


def sample_task(dataset: Dataset, labels: Sequence[int], family: str, N: int, K: int,
                rng: np.random.Generator, query_per_label: int = 1) -> Task:
    """Sample one task from the given split's label set.

    ``category``: N categories, K support + ``query_per_label`` disjoint query
    instances each.  Instance families: N objects whose query episodes reuse
    the support objects from initial views differing from all support views
    (``inter_instance`` draws the objects from a single category).
    """
    if family not in FAMILIES:
        raise ConfigError(f"unknown task family {family!r}")
    labels = np.array(sorted(labels))
    Q = query_per_label
    if family == "category":
        if len(labels) < N:
            raise SamplingError(f"{N}-way task needs {N} categories, split has {len(labels)}")
        cats = rng.choice(labels, N, replace=False)
        support, query = [], []
        for k, c in enumerate(cats):
            pool = dataset.instances_of(int(c))
            if len(pool) < K + Q:
                raise SamplingError(f"category {c} has {len(pool)} instances, need {K + Q}")
            picks = rng.choice(pool, K + Q, replace=False)
            support += [(dataset[int(i)], k) for i in picks[:K]]
            query += [(dataset[int(i)], k) for i in picks[K:]]
        sv = _random_views(rng, dataset, len(support))
        qv = _random_views(rng, dataset, len(query))
        return Task(support, query, family, sv, qv)

    if family == "intra_instance":
        if len(labels) < N:
            raise SamplingError(f"{N}-way task needs {N} instances, split has {len(labels)}")
        objs = rng.choice(labels, N, replace=False)
    else:
        eligible = [int(c) for c in labels if len(dataset.instances_of(int(c))) >= N]
        if not eligible:
            raise SamplingError(f"no category in the split has {N} instances")
        cat = int(rng.choice(eligible))
        objs = rng.choice(dataset.instances_of(cat), N, replace=False)
    views = _distinct_views(rng, dataset, N, K + Q)
    support, query, sv, qv = [], [], [], []
    for k, i in enumerate(objs):
        support += [(dataset[int(i)], k)] * K
        query += [(dataset[int(i)], k)] * Q
        sv += views[k][:K]
        qv += views[k][K:]
    return Task(support, query, family, sv, qv)


@dataclass
class MetaConfig:
    N: int = 5
    K: int = 1
    query_per_label: int = 1
    T: int = 3
    inner_lr: float = 1e-3
    outer_lr: float = 1e-3
    inner_steps: int = 1
    tasks_per_batch: int = 2
    iterations_per_epoch: int = 500
    epochs: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    first_order: bool = True
    optimizer: str = "sgd"
    grad_clip: float = 0.0
    family: str = "category"
    policy: str = "learned"
    reward_baseline: bool = False
    baseline_decay: float = 0.9
    val_tasks: int = 100
    test_tasks: int = 600
    hidden: int = 32
    embed: int = 8
    radius_e: int = 1
    radius_a: int = 1
    hvp_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        for name in ("N", "K", "query_per_label", "T", "tasks_per_batch",
                     "iterations_per_epoch", "epochs", "hidden", "embed"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.inner_lr < 0 or self.outer_lr < 0 or self.inner_steps < 0:
            raise ConfigError("learning rates and inner_steps must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if self.val_tasks < 0 or self.test_tasks < 1:
            raise ConfigError("val_tasks must be >= 0 and test_tasks >= 1")

    def replace(self, **kw) -> "MetaConfig":
        return dataclasses.replace(self, **kw)

    def action_set(self) -> ActionSet:
        return ActionSet(self.radius_e, self.radius_a)

    def dims(self, feature_dim: int, num_classes: int | None = None) -> AgentDims:
        return AgentDims(feature_dim, self.hidden, self.embed, len(self.action_set()),
                         self.N if num_classes is None else num_classes)

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        return d


class Objective(Protocol):
    """What the MAML loop needs from a problem.

    ``support_grad`` returns ``(loss, grads, record)``; replaying the record
    through ``support_replay_grad`` must reproduce the same stochastic choices
    at a different ``theta`` (used only for second-order verification).
    """

    def support_grad(self, theta: ParamSet, task, rng) -> tuple[float, ParamSet, object]: ...

    def support_replay_grad(self, theta: ParamSet, task, record) -> ParamSet: ...

    def query_grad(self, theta: ParamSet, task, rng) -> tuple[float, ParamSet, dict]: ...


def _check_finite(grads: ParamSet, where: str) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} during {where}")


@dataclass
class EpisodeRecord:
    actions: np.ndarray
    rewards: np.ndarray


class AgentObjective:
    """Mean episode loss over batched rollouts of one task phase."""

    def __init__(self, cfg: MetaConfig):
        self.cfg = cfg
        self.action_set = cfg.action_set()
        self.baseline = 0.0

    def _grad(self, theta, task, which, rng, mode="sample", forced=None, rewards=None):
        feats, labels, starts = task.phase(which)
        batch = rollout_batch(theta, feats, labels, starts, self.cfg.T, self.action_set,
                              mode=mode, policy=self.cfg.policy, rng=rng, forced=forced)
        if rewards is not None:
            batch.rewards = rewards
        b = self.baseline if self.cfg.reward_baseline else 0.0
        parts = batch_loss(batch, self.cfg.weights, b)
        grads = batch.tape.backward(parts.total)
        return parts, grads, batch

    def support_grad(self, theta, task, rng):
        parts, grads, batch = self._grad(theta, task, "support", rng)
        return float(parts.total.value), grads, EpisodeRecord(batch.actions.copy(),
                                                              batch.rewards.copy())

    def support_replay_grad(self, theta, task, record):
        _, grads, _ = self._grad(theta, task, "support", None, mode="forced",
                                 forced=record.actions, rewards=record.rewards)
        return grads

    def query_grad(self, theta, task, rng):
        parts, grads, batch = self._grad(theta, task, "query", rng)
        stats = {"reward": float(batch.rewards.mean()), "entropy": batch.mean_entropy()}
        return float(parts.total.value), grads, stats


def _axpy(theta: ParamSet, grads: ParamSet, step: float) -> ParamSet:
    return {k: theta[k] - step * grads[k] for k in theta}


def adapt(theta: ParamSet, task, cfg: MetaConfig, rng: np.random.Generator,
          objective: Objective) -> tuple[ParamSet, list]:
    """``cfg.inner_steps`` gradient steps on the support loss.  ``theta`` is not touched."""
    records = []
    current = theta
    for _ in range(cfg.inner_steps):
        _, grads, record = objective.support_grad(current, task, rng)
        _check_finite(grads, "inner adaptation")
        records.append((current, record))
        current = _axpy(current, grads, cfg.inner_lr)
    if current is theta:
        current = {k: v.copy() for k, v in theta.items()}
    return current, records


def inner_adapt(theta: ParamSet, task, cfg: MetaConfig, rng: np.random.Generator,
                objective: Objective | None = None) -> ParamSet:
    """theta_i = theta - alpha * grad L_support(theta), repeated ``inner_steps`` times."""
    return adapt(theta, task, cfg, rng, objective or AgentObjective(cfg))[0]


def _hvp(objective, theta, task, record, v, eps):
    plus = objective.support_replay_grad(_axpy(theta, v, -eps), task, record)
    minus = objective.support_replay_grad(_axpy(theta, v, eps), task, record)
    return {k: (plus[k] - minus[k]) / (2 * eps) for k in theta}


def meta_gradient(theta: ParamSet, tasks: Sequence, cfg: MetaConfig,
                  rngs: Sequence[np.random.Generator], objective: Objective):
    """Mean over tasks of d L_query(theta_i) / d theta.

    First-order: the gradient at theta_i is used as is.  Otherwise it is pulled
    back through each inner step with finite-difference Hessian-vector products
    (``g <- g - alpha * H g``) of the replayed support loss.
    """
    total = {k: np.zeros_like(v) for k, v in theta.items()}
    losses, stats = [], []
    for task, rng in zip(tasks, rngs):
        rng_s, rng_q = rng.spawn(2)
        theta_i, records = adapt(theta, task, cfg, rng_s, objective)
        loss, g, st = objective.query_grad(theta_i, task, rng_q)
        _check_finite(g, "outer step")
        if not cfg.first_order:
            for theta_k, record in reversed(records):
                hv = _hvp(objective, theta_k, task, record, g, cfg.hvp_eps)
                g = {k: g[k] - cfg.inner_lr * hv[k] for k in g}
        for k in total:
            total[k] += g[k]
        losses.append(loss)
        stats.append(st)
    n = len(tasks)
    return {k: v / n for k, v in total.items()}, losses, stats


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, theta: ParamSet, grads: ParamSet) -> ParamSet:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            out[k] = theta[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _clip(grads: ParamSet, max_norm: float) -> ParamSet:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def outer_step(theta: ParamSet, tasks: Sequence, cfg: MetaConfig,
               rngs: Sequence[np.random.Generator], objective: Objective | None = None,
               optimizer: Adam | None = None) -> tuple[ParamSet, dict]:
    """One meta-update from a batch of tasks; returns ``(theta', info)``."""
    if not tasks:
        raise ContractError("outer_step needs at least one task")
    objective = objective or AgentObjective(cfg)
    grad, losses, stats = meta_gradient(theta, tasks, cfg, rngs, objective)
    grad = _clip(grad, cfg.grad_clip)
    if optimizer is not None:
        new = optimizer.step(theta, grad)
    else:
        new = _axpy(theta, grad, cfg.outer_lr)
    info = {"loss": float(np.mean(losses)), "grad": grad, "stats": stats}
    return new, info


def make_optimizer(cfg: MetaConfig) -> Adam | None:
    return Adam(cfg.outer_lr) if cfg.optimizer == "adam" else None


def evaluate_task(theta: ParamSet, task: Task, cfg: MetaConfig, rng: np.random.Generator,
                  return_batches: bool = False):
    """Adapt on the support set, then roll out the query set; returns query accuracy.

    The learned policy acts greedily on the query set; the uniform baseline
    policy keeps sampling.
    """
    objective = AgentObjective(cfg)
    rng_s, rng_q = rng.spawn(2)
    theta_i, _ = adapt(theta, task, cfg, rng_s, objective)
    feats, labels, starts = task.phase("query")
    mode = "sample" if cfg.policy == "uniform" else "argmax"
    batch = rollout_batch(theta_i, feats, labels, starts, cfg.T, objective.action_set,
                          mode=mode, policy=cfg.policy, rng=rng_q)
    acc = float(batch.rewards.mean())
    if return_batches:
        fs, ls, ss = task.phase("support")
        support = rollout_batch(theta, fs, ls, ss, cfg.T, objective.action_set,
                                mode=mode, policy=cfg.policy, rng=rng_s.spawn(1)[0])
        return acc, support, batch
    return acc


def init_theta(cfg: MetaConfig, dataset: Dataset) -> ParamSet:
    return init_params(stream(cfg.seed, TAG_INIT), cfg.dims(dataset.geometry.feature_dim))


def validation_tasks(dataset, splits, cfg, phase="val", count=None, tag=TAG_VAL) -> list:
    count = cfg.val_tasks if count is None else count
    labels = splits.labels(phase)
    return [sample_task(dataset, labels, cfg.family, cfg.N, cfg.K, stream(cfg.seed, tag, 0, j),
                        cfg.query_per_label) for j in range(count)]


def evaluate_tasks(theta, tasks, cfg, tag) -> np.ndarray:
    return np.array([evaluate_task(theta, t, cfg, stream(cfg.seed, tag, 1, j))
                     for j, t in enumerate(tasks)])


@dataclass
class TrainResult:
    theta: ParamSet            # best validation checkpoint
    final_theta: ParamSet
    metrics: list[dict]
    best_epoch: int


def run_meta_training(dataset: Dataset, splits: SplitSpec, cfg: MetaConfig,
                      theta: ParamSet | None = None,
                      on_epoch: Callable[[dict, ParamSet], None] | None = None,
                      timing: bool = False) -> TrainResult:
    """Epochs x iterations of :func:`outer_step`, validating after each epoch.

    ``wall_seconds`` is filled only with ``timing=True``; otherwise it is nan
    so that repeated runs produce identical metrics.
    """
    theta = init_theta(cfg, dataset) if theta is None else theta
    objective = AgentObjective(cfg)
    optimizer = make_optimizer(cfg)
    val = validation_tasks(dataset, splits, cfg)
    train_labels = splits.labels("train")
    best_acc, best_theta, best_epoch = -1.0, theta, 0
    metrics = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        losses, rewards, entropies = [], [], []
        for it in range(cfg.iterations_per_epoch):
            task_rng = stream(cfg.seed, TAG_TRAIN, epoch, it, 0)
            tasks = [sample_task(dataset, train_labels, cfg.family, cfg.N, cfg.K, task_rng,
                                 cfg.query_per_label) for _ in range(cfg.tasks_per_batch)]
            rngs = [stream(cfg.seed, TAG_TRAIN, epoch, it, 1, j) for j in range(len(tasks))]
            theta, info = outer_step(theta, tasks, cfg, rngs, objective, optimizer)
            losses.append(info["loss"])
            for st in info["stats"]:
                rewards.append(st["reward"])
                entropies.append(st["entropy"])
                if cfg.reward_baseline:
                    objective.baseline = (cfg.baseline_decay * objective.baseline
                                          + (1 - cfg.baseline_decay) * st["reward"])
        accs = evaluate_tasks(theta, val, cfg, TAG_VAL) if val else np.array([float("nan")])
        row = {
            "epoch": epoch,
            "meta_train_loss": float(np.mean(losses)),
            "meta_train_acc": float(np.mean(rewards)),
            "val_acc_mean": float(accs.mean()),
            "val_acc_std": float(accs.std()),
            "mean_policy_entropy": float(np.mean(entropies)) if cfg.T > 1 else float("nan"),
            "wall_seconds": time.perf_counter() - start if timing else float("nan"),
        }
        metrics.append(row)
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f entropy %.3f", epoch,
                 row["meta_train_loss"], row["meta_train_acc"], row["val_acc_mean"],
                 row["mean_policy_entropy"])
        if not val or row["val_acc_mean"] > best_acc:
            best_acc, best_theta, best_epoch = row["val_acc_mean"], theta, epoch
        if on_epoch is not None:
            on_epoch(row, theta)
    return TrainResult(best_theta, theta, metrics, best_epoch)


@dataclass
class TestReport:
    accuracy_mean: float
    ci95: float
    num_tasks: int
    per_task: np.ndarray
    config: dict

    def record(self) -> dict:
        return {"accuracy_mean": self.accuracy_mean, "ci95": self.ci95,
                "num_tasks": self.num_tasks, "config": self.config}

    def text(self) -> str:
        return (f"accuracy {100 * self.accuracy_mean:.2f}% +- {100 * self.ci95:.2f} "
                f"(95% CI, {self.num_tasks} tasks)")


def mean_ci95(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return float(x.mean()), float("nan")
    return float(x.mean()), float(1.96 * x.std(ddof=1) / math.sqrt(len(x)))


def run_meta_test(theta: ParamSet, dataset: Dataset, splits: SplitSpec, cfg: MetaConfig,
                  num_tasks: int | None = None) -> TestReport:
    """Mean query accuracy over freshly sampled MetaTest tasks (normal-approx CI)."""
    num_tasks = cfg.test_tasks if num_tasks is None else num_tasks
    tasks = validation_tasks(dataset, splits, cfg, phase="test", count=num_tasks, tag=TAG_TEST)
    accs = evaluate_tasks(theta, tasks, cfg, TAG_TEST)
    mean, ci = mean_ci95(accs)
    return TestReport(mean, ci, num_tasks, accs, cfg.echo())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows: list[dict], path, method: str | None = None) -> None:
    cols = (("method",) if method is not None else ()) + METRIC_COLUMNS
    lines = [",".join(cols)]
    for r in rows:
        vals = ([method] if method is not None else []) + [_fmt(r[c]) for c in METRIC_COLUMNS]
        lines.append(",".join(vals))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
