"""Episode losses: cross-entropy, REINFORCE and negative entropy.

The per-trajectory functions are the reference definitions; ``batch_loss``
computes the mean of ``total_loss`` over an :class:`EpisodeBatch` with far
fewer tape nodes and is what the training loops call.  With ``T == 1`` there
are no decisions, so the policy and entropy terms are defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .agent import EpisodeBatch, Trajectory
from .errors import ConfigError

ENTROPY_FORMS = ("full", "sampled")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 0.003
    entropy_form: str = "full"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be >= 0, got {self.lambda1}, {self.lambda2}")
        if self.entropy_form not in ENTROPY_FORMS:
            raise ConfigError(f"entropy_form must be one of {ENTROPY_FORMS}")


def _safe_plogp(logp: np.ndarray) -> np.ndarray:
    p = np.exp(logp)
    return np.where(p > 0, p * np.where(np.isfinite(logp), logp, 0.0), 0.0)


def _zero(tape: tp.Tape) -> tp.Node:
    return tape.constant(0.0)


def classification_loss(traj: Trajectory) -> tp.Node:
    return tp.scale(tp.pick(traj.final_logp_node, traj.true_label), -1.0)


def policy_loss(traj: Trajectory, baseline: float = 0.0) -> tp.Node:
    """``-(1/(T-1)) sum_t log pi(a_t|s_t) * (R - baseline)``; R is a constant."""
    tape = traj.final_logp_node.tape
    if traj.T < 2:
        return _zero(tape)
    picked = [tp.pick(n, a) for n, a in zip(traj.step_logp_nodes, traj.actions)]
    return tp.scale(tp.add_all(picked), -(traj.reward - baseline) / (traj.T - 1))


def entropy_loss(traj: Trajectory, form: str = "full") -> tp.Node:
    """Mean over decision steps of ``sum_a pi log pi`` (the negative entropy).

    ``form="sampled"`` keeps only the sampled action's ``pi(a_t) log pi(a_t)``.
    """
    tape = traj.final_logp_node.tape
    if traj.T < 2:
        return _zero(tape)
    terms = []
    for n, a in zip(traj.step_logp_nodes, traj.actions):
        if n.op == "const":
            v = _safe_plogp(n.value)
            terms.append(tape.constant(v.sum() if form == "full" else v[a]))
        elif form == "full":
            terms.append(tp.total(tp.mul(tp.exp(n), n)))
        else:
            lp = tp.pick(n, a)
            terms.append(tp.mul(tp.exp(lp), lp))
    return tp.scale(tp.add_all(terms), 1.0 / (traj.T - 1))


def total_loss(traj: Trajectory, w: LossWeights, baseline: float = 0.0) -> tp.Node:
    loss = classification_loss(traj)
    if w.lambda1:
        loss = tp.add(loss, tp.scale(policy_loss(traj, baseline), w.lambda1))
    if w.lambda2:
        loss = tp.add(loss, tp.scale(entropy_loss(traj, w.entropy_form), w.lambda2))
    return loss


def mean_total_loss(trajs: list[Trajectory], w: LossWeights, baseline: float = 0.0) -> tp.Node:
    return tp.scale(tp.add_all([total_loss(t, w, baseline) for t in trajs]), 1.0 / len(trajs))


@dataclass
class LossParts:
    total: tp.Node
    classification: float
    policy: float
    entropy: float


def batch_loss(batch: EpisodeBatch, w: LossWeights, baseline: float = 0.0) -> LossParts:
    """Mean over the batch of :func:`total_loss`, vectorized."""
    tape = batch.tape
    B, T = batch.size, batch.T
    cls = tp.scale(tp.total(tp.pick(batch.final_logp, batch.labels)), -1.0 / B)
    loss = cls
    pol_v = ent_v = 0.0
    if T >= 2 and batch.policy == "learned":
        weight = tape.constant(batch.rewards - baseline)
        picked = [tp.mul(tp.pick(n, batch.actions[:, t]), weight)
                  for t, n in enumerate(batch.step_logp)]
        pol = tp.scale(tp.total(tp.add_all(picked)), -1.0 / (B * (T - 1)))
        pol_v = float(pol.value)
        if w.entropy_form == "full":
            ent_terms = [tp.total(tp.mul(tp.exp(n), n)) for n in batch.step_logp]
        else:
            ent_terms = []
            for t, n in enumerate(batch.step_logp):
                lp = tp.pick(n, batch.actions[:, t])
                ent_terms.append(tp.total(tp.mul(tp.exp(lp), lp)))
        ent = tp.scale(tp.add_all(ent_terms), 1.0 / (B * (T - 1)))
        ent_v = float(ent.value)
        if w.lambda1:
            loss = tp.add(loss, tp.scale(pol, w.lambda1))
        if w.lambda2:
            loss = tp.add(loss, tp.scale(ent, w.lambda2))
    elif T >= 2:
        # fixed policies: the terms are constants, reported but not differentiated
        trajs_lp = [n.value for n in batch.step_logp]
        pol_v = float(-np.mean([lp[np.arange(B), batch.actions[:, t]] * (batch.rewards - baseline)
                                for t, lp in enumerate(trajs_lp)]))
        plogp = [_safe_plogp(lp) for lp in trajs_lp]
        if w.entropy_form == "full":
            ent_v = float(np.mean([v.sum(axis=1) for v in plogp]))
        else:
            ent_v = float(np.mean([v[np.arange(B), batch.actions[:, t]]
                                   for t, v in enumerate(plogp)]))
        const = w.lambda1 * pol_v + w.lambda2 * ent_v
        if const:
            loss = tp.add(loss, tape.constant(const))
    return LossParts(loss, float(cls.value), pol_v, ent_v)
