"""Brute-force references for the tests.

The references never call :meth:`Tape.backward`.  Gradients come from
central differences of forward evaluations, expected rewards from
enumerating every action sequence.  They are slow by design and meant for
tiny problems.  :func:`monte_carlo_policy_gradient` is the exception: it is
the tape-based estimator the references are compared against.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .agent import ParamSet, rollout_batch
from .env import ActionSet, Dataset
from .errors import SizeError
from .losses import policy_loss

MAX_SEQUENCES = 100_000


def finite_diff_grad(loss_fn: Callable[[ParamSet], float], theta: ParamSet,
                     h: float = 1e-5, stencil: int = 3) -> ParamSet:
    """Central differences ``(f(θ + h e_i) - f(θ - h e_i)) / 2h`` for every coordinate.

    ``stencil=5`` uses the fourth-order 5-point rule instead, for checks that
    need more than about six significant digits.
    """
    if stencil not in (3, 5):
        raise ValueError(f"stencil must be 3 or 5, got {stencil}")

    def at(flat, i, x0, step):
        flat[i] = x0 + step
        return float(loss_fn(work))

    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in theta.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            if stencil == 3:
                gflat[i] = (at(flat, i, x0, h) - at(flat, i, x0, -h)) / (2 * h)
            else:
                gflat[i] = (8 * (at(flat, i, x0, h) - at(flat, i, x0, -h))
                            - (at(flat, i, x0, 2 * h) - at(flat, i, x0, -2 * h))) / (12 * h)
            flat[i] = x0
        grads[name] = g
    return grads


def max_rel_err(a: ParamSet, b: ParamSet, floor: float = 1e-8) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all coordinates."""
    worst = 0.0
    for k in a:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def _sequences(action_set: ActionSet, T: int) -> np.ndarray:
    seqs = list(itertools.product(range(len(action_set)), repeat=T - 1))
    return np.array(seqs, dtype=np.int64).reshape(len(seqs), T - 1)


def _enumerated(theta, feats, labels, starts, T, action_set):
    """Per episode: (sequence probabilities, rewards), both ``(num_seqs,)``."""
    seqs = _sequences(action_set, T)
    S = len(seqs)
    out = []
    for f, y, s in zip(feats, labels, starts):
        batch = rollout_batch(theta, np.repeat(f[None], S, axis=0), np.full(S, y),
                              np.repeat(np.asarray(s)[None], S, axis=0), T, action_set,
                              mode="forced", forced=seqs)
        logp = np.zeros(S)
        for t, node in enumerate(batch.step_logp):
            logp += node.value[np.arange(S), seqs[:, t]]
        out.append((np.exp(logp), batch.rewards.copy()))
    return out


def enumerate_expected_reward(theta: ParamSet, feats, labels: Sequence[int], starts, T: int,
                              action_set: ActionSet, grad: bool = True, h: float = 1e-3):
    """Exact ``E[R]`` (mean over episodes) and its policy gradient.

    ``E[R] = mean_b sum_seq P_θ(seq | b) R(seq, b)``.  The gradient is the
    score-function identity ``sum R ∇P`` with R held at its value under θ (it
    is piecewise constant in θ), obtained by central differences of the
    forward sequence probabilities (5-point rule).  Returns
    ``(value, grads or None)``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    n_seq = len(action_set) ** max(T - 1, 0)
    if n_seq * len(feats) > MAX_SEQUENCES:
        raise SizeError(f"{n_seq} sequences x {len(feats)} episodes exceeds the "
                        f"enumeration cap of {MAX_SEQUENCES}")
    base = _enumerated(theta, feats, labels, starts, T, action_set)
    value = float(np.mean([p @ r for p, r in base]))
    if not grad:
        return value, None
    rewards = [r for _, r in base]

    def weighted(th):
        probs = _enumerated(th, feats, labels, starts, T, action_set)
        return float(np.mean([p @ r for (p, _), r in zip(probs, rewards)]))

    return value, finite_diff_grad(weighted, theta, h, stencil=5)


def nearest_prototype_accuracy(dataset: Dataset | None, task) -> float:
    """Classify each query object by the nearest support object over the full grid."""
    sup = np.stack([o.grid.features.reshape(-1) for o, _ in task.support])
    sup_y = np.array([y for _, y in task.support])
    hits = []
    for o, y in task.query:
        d = np.sum((sup - o.grid.features.reshape(-1)) ** 2, axis=1)
        hits.append(sup_y[int(np.argmin(d))] == y)
    return float(np.mean(hits))


def monte_carlo_policy_gradient(theta: ParamSet, feats, labels: Sequence[int], starts, T: int,
                                action_set: ActionSet, num_samples: int,
                                rng: np.random.Generator):
    """Mean and standard error of ``-∇ policy_loss`` over sampled episodes.

    Each sample rolls out every episode once and averages their estimators,
    so the target is the gradient of the mean expected reward.  This goes
    through the tape (it is the estimator under test); the gradient of each
    distinct outcome is computed once and reused.  Returns ``(mean, se)``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    starts = np.asarray(starts)
    B = len(feats)
    rep = np.repeat(np.arange(B), num_samples)
    batch = rollout_batch(theta, feats[rep], np.asarray(labels)[rep], starts[rep], T,
                          action_set, mode="sample", rng=rng)
    acts = batch.actions.reshape(B, num_samples, T - 1)
    mean = {k: np.zeros_like(v) for k, v in theta.items()}
    var = {k: np.zeros_like(v) for k, v in theta.items()}
    for b in range(B):
        # episodes are independent, so per-sample variance is the sum of per-episode ones
        seqs, counts = np.unique(acts[b], axis=0, return_counts=True)
        freq = counts / num_samples
        outcome = []
        for seq in seqs:
            one = rollout_batch(theta, feats[b:b + 1], [labels[b]], starts[b:b + 1], T,
                                action_set, mode="forced", forced=seq[None])
            grads = one.tape.backward(policy_loss(one.trajectory(0)))
            outcome.append({k: -g / B for k, g in grads.items()})
        for k in mean:
            g = np.stack([o[k] for o in outcome])
            m = np.tensordot(freq, g, axes=1)
            mean[k] += m
            var[k] += np.tensordot(freq, (g - m) ** 2, axes=1) * num_samples / (num_samples - 1)
    se = {k: np.sqrt(v / num_samples) for k, v in var.items()}
    return mean, se
