"""Acceptance gate: one test per criterion, tolerances as contracted.

The end-to-end criteria (4, 5, 6, 9 and the 30-epoch validation check) share
trained runs through a session cache, so each (method, seed, family, lambda2)
is trained once.  The schedule comes from ``configs/acceptance.cfg``
(30 epochs x 100 iterations).  Run just this file with
``pytest tests/test_acceptance.py -v``; ``-m "not slow"`` skips the
end-to-end ones.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from metaview import oracle
from metaview.agent import param_digest
from metaview.baselines import METHODS, FinetuneConfig, pretrain_finetune, train_method
from metaview.baselines import test_method as evaluate_method
from metaview.env import GeneratorConfig, GridGeometry, generate_dataset
from metaview.harness import (GRADCHECK_TOL, load_config, main, tiny_gradcheck,
                              unbiasedness_check)
from metaview.meta import (TAG_TEST, AgentObjective, MetaConfig, inner_adapt, init_theta,
                           make_splits, mean_ci95, outer_step, sample_task, stream,
                           validation_tasks)

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "acceptance.cfg"
SEEDS = (0, 1, 2)
TEST_TASKS = 600
LAMBDA2S = (0.001, 0.003, 0.01)
BUDGET_SECONDS = 2 * 3600

_runs: dict = {}
_data: dict = {}
_clock = {"training": 0.0}


def acceptance_cfg(seed: int, family: str = "category", lambda2: float = 0.003) -> MetaConfig:
    rc = load_config(CONFIG, {"seed": seed, "family": family, "lambda2": lambda2})
    return rc.meta


def dataset(seed: int):
    if seed not in _data:
        rc = load_config(CONFIG, {"seed": seed})
        _data[seed] = generate_dataset(rc.generator, rc.geometry)
    return _data[seed]


def run(method: str, seed: int, family: str = "category", lambda2: float = 0.003):
    """Train then test once per key; returns ``(TrainResult, TestReport)``."""
    key = (method, seed, family, lambda2)
    if key not in _runs:
        t0 = time.perf_counter()
        ds = dataset(seed)
        cfg = acceptance_cfg(seed, family, lambda2)
        splits = make_splits(ds, family, seed=seed)
        res = train_method(method, ds, splits, cfg)
        rep = evaluate_method(method, res.theta, ds, splits, cfg, TEST_TASKS)
        _clock["training"] += time.perf_counter() - t0
        _runs[key] = (res, rep)
    return _runs[key]


def paired_gap(a: str, b: str, seeds=SEEDS, family="category"):
    """Mean and 95% CI of per-task accuracy differences a - b, pooled over seeds."""
    diffs = np.concatenate([run(a, s, family)[1].per_task - run(b, s, family)[1].per_task
                            for s in seeds])
    return mean_ci95(diffs)


def describe(names, seeds=SEEDS, family="category"):
    return ", ".join(f"{m} {100 * np.mean([run(m, s, family)[1].accuracy_mean for s in seeds]):.2f}%"
                     for m in names)


# 1 -------------------------------------------------------------------------

def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    cfg = MetaConfig(hidden=8, embed=4, radius_e=0, radius_a=1, T=3, N=2)
    assert len(cfg.action_set()) == 3
    err, _ = tiny_gradcheck(cfg, 4, GridGeometry(3, 4, 4), seed=0)
    elapsed = time.perf_counter() - t0
    assert err <= GRADCHECK_TOL, f"max rel-err {err:.3e}"
    assert elapsed < 10, f"{elapsed:.1f}s"


# 2 -------------------------------------------------------------------------

def test_c2_reinforce_unbiased():
    t0 = time.perf_counter()
    worst, value, mean, exact, se = unbiasedness_check(0, 100_000)
    elapsed = time.perf_counter() - t0
    assert worst <= 3.0, f"max |z| = {worst:.2f}"
    assert any(np.abs(exact[k]).max() > 1e-6 for k in exact)
    assert elapsed < 60, f"{elapsed:.1f}s"


# 3 -------------------------------------------------------------------------

class _Quadratic:
    def __init__(self, rng, n=5):
        M1, M2 = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        self.A, self.a = M1 @ M1.T + np.eye(n), rng.normal(size=n)
        self.B, self.b = M2 @ M2.T + np.eye(n), rng.normal(size=n)

    def support_grad(self, theta, task, rng):
        return 0.0, {"x": self.A @ (theta["x"] - self.a)}, None

    def support_replay_grad(self, theta, task, record):
        return {"x": self.A @ (theta["x"] - self.a)}

    def query_grad(self, theta, task, rng):
        return 0.0, {"x": self.B @ (theta["x"] - self.b)}, {}


def test_c3_maml_mechanics():
    ds = generate_dataset(GeneratorConfig(num_categories=12, instances_per_category=2, seed=0),
                          GridGeometry())
    splits = make_splits(ds, "category", counts=(6, 1, 5))
    cfg = MetaConfig(hidden=8, embed=4, inner_lr=0.7, outer_lr=0.05)
    theta = init_theta(cfg, ds)
    tasks = [sample_task(ds, splits.meta_train, "category", 5, 1, stream(i)) for i in range(2)]

    # (a) alpha = 0
    same = inner_adapt(theta, tasks[0], cfg.replace(inner_lr=0.0), stream(9))
    assert param_digest(same) == param_digest(theta)

    # (b) no inner steps: plain mini-batch descent on the query loss
    c0 = cfg.replace(inner_steps=0)
    new, _ = outer_step(theta, tasks, c0, [stream(20), stream(21)])
    obj = AgentObjective(c0)
    gs = [obj.query_grad(theta, t, stream(20 + i).spawn(2)[1])[1] for i, t in enumerate(tasks)]
    want = {k: theta[k] - c0.outer_lr * (gs[0][k] + gs[1][k]) / 2 for k in theta}
    assert max(float(np.abs(new[k] - want[k]).max()) for k in theta) <= 1e-12

    # (c) first-order update on a quadratic against its closed form
    q = _Quadratic(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=5)
    cq = MetaConfig(inner_lr=0.05, outer_lr=0.1)
    new, _ = outer_step({"x": x}, [None], cq, [stream(0)], q)
    xi = x - 0.05 * q.A @ (x - q.a)
    assert float(np.abs(new["x"] - (x - 0.1 * q.B @ (xi - q.b))).max()) <= 1e-10


# 4 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c4_baseline_ordering():
    for m in ("metaview", "largest", "random-multi", "random-one"):
        for s in SEEDS:
            run(m, s)
    summary = describe(("metaview", "largest", "random-multi", "random-one"))
    failures = []
    for a, b in (("metaview", "largest"), ("metaview", "random-multi"),
                 ("random-multi", "random-one")):
        gap, ci = paired_gap(a, b)
        if not (gap >= 0.05 and gap > ci):
            failures.append(f"{a} - {b} = {100 * gap:.2f} +- {100 * ci:.2f} points")
    assert _clock["training"] < BUDGET_SECONDS
    assert not failures, f"{'; '.join(failures)} ({summary})"


# 5 -------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("family", ["intra_instance", "inter_instance"])
def test_c5_instance_families(family):
    gap, ci = paired_gap("metaview", "random-one", seeds=(0,), family=family)
    summary = describe(("metaview", "random-one"), seeds=(0,), family=family)
    assert gap >= 0.15, f"metaview - random-one = {100 * gap:.2f} +- {100 * ci:.2f} ({summary})"


# 6 -------------------------------------------------------------------------

def final_entropy(res) -> float:
    return float(np.mean([r["mean_policy_entropy"] for r in res.metrics[-10:]]))


@pytest.mark.slow
def test_c6_entropy_coefficient():
    xs, ys = [], []
    for lam in LAMBDA2S:
        for s in SEEDS:
            xs.append(lam)
            ys.append(final_entropy(run("metaview", s, lambda2=lam)[0]))
    means = [np.mean([y for x, y in zip(xs, ys) if x == lam]) for lam in LAMBDA2S]
    rho, p = spearmanr(xs, ys, alternative="greater")
    detail = f"means {np.round(means, 4).tolist()}, spearman {rho:.3f} p={p:.4f}"
    assert all(b >= a for a, b in zip(means, means[1:])), detail
    assert p <= 0.05, detail


# 7 -------------------------------------------------------------------------

def test_c7_degenerate_environment():
    base = load_config(CONFIG).generator
    flat = dataclasses.replace(base, signal_scale=0.0, instance_noise=0.0, instance_signal_cells=0)
    ds = generate_dataset(flat, GridGeometry())
    splits = make_splits(ds, "category")
    # nothing to learn, so a short schedule is enough to expose any label leak
    cfg = load_config(CONFIG).meta.replace(epochs=2, iterations_per_epoch=10, val_tasks=10)
    for m in METHODS:
        if m == "pretrain-finetune":
            rep = pretrain_finetune(ds, splits, cfg, FinetuneConfig(pretrain_iters=20,
                                                                    finetune_steps=20),
                                    TEST_TASKS).report
        else:
            res = train_method(m, ds, splits, cfg)
            rep = evaluate_method(m, res.theta, ds, splits, cfg, TEST_TASKS)
        # all grids are identical, so each query episode sees the same evidence
        assert abs(rep.accuracy_mean - 0.2) <= max(rep.ci95, 1e-12), (m, rep.text())

    real = dataset(0)
    sp = make_splits(real, "category", seed=0)
    tasks = validation_tasks(real, sp, MetaConfig(), phase="test", count=TEST_TASKS, tag=TAG_TEST)
    acc = np.mean([oracle.nearest_prototype_accuracy(real, t) for t in tasks])
    assert acc >= 0.95, f"nearest prototype {acc:.3f}"


# 8 -------------------------------------------------------------------------

def test_c8_determinism(tmp_path, capsys):
    small = ["--set", "num_categories=40", "--set", "instances_per_category=3",
             "--set", "hidden=8", "--set", "embed=4", "--set", "val_tasks=3",
             "--set", "test_tasks=5", "--seed", "7"]
    commands = [
        ["gen-data"],
        ["meta-train", "--epochs", "2", "--iters", "2"],
        ["meta-test"],
        ["baseline", "--method", "largest", "--epochs", "1", "--iters", "2"],
        ["baseline", "--method", "pretrain-finetune", "--tasks", "2",
         "--set", "pretrain_iters=3", "--set", "finetune_steps=2"],
    ]
    for d in ("a", "b"):
        for cmd in commands:
            assert main(cmd + small + ["--out-dir", str(tmp_path / d)]) == 0, cmd
    capsys.readouterr()
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert {"metrics.csv", "best.ckpt", "final.ckpt", "report.json", "dataset.mvg",
            "largest_metrics.csv", "pretrain-finetune_pretrained.ckpt"} <= set(files)
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


# 9 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c9_pretrain_finetune_falls_short():
    diffs, pf_acc, train_acc = [], [], []
    for s in SEEDS:
        ds = dataset(s)
        rc = load_config(CONFIG, {"seed": s})
        splits = make_splits(ds, "category", seed=s)
        pf = pretrain_finetune(ds, splits, rc.meta, rc.finetune, TEST_TASKS)
        mv = run("metaview", s)[1]
        diffs.append(mv.per_task - pf.report.per_task)
        pf_acc.append(pf.report.accuracy_mean)
        train_acc.append(pf.train_acc)
    gap, ci = mean_ci95(np.concatenate(diffs))
    summary = (f"pretrain-finetune {100 * np.mean(pf_acc):.2f}% (pretraining accuracy "
               f"{100 * np.mean(train_acc):.2f}%), {describe(('metaview',))}")
    assert gap >= 0.05, f"metaview - pretrain-finetune = {100 * gap:.2f} +- {100 * ci:.2f} ({summary})"


# validation level after the reduced schedule -------------------------------

@pytest.mark.slow
def test_validation_accuracy_after_30_epochs():
    accs = [run("metaview", s)[0].metrics[-1]["val_acc_mean"] for s in SEEDS]
    assert len(run("metaview", 0)[0].metrics) == 30
    assert np.mean(accs) >= 0.2 + 0.2, f"validation accuracy {np.round(accs, 3).tolist()}"
