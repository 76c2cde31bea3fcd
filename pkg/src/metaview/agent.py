"""Recurrent view-selection agent.

Per glimpse: encode the view features with a two-layer tanh MLP, look up an
embedding of the previous action, fuse both with an affine+tanh layer, and
feed the fusion vector to an Elman cell.  Before the last glimpse the RNN
state drives a softmax policy over the action set; at the last glimpse it
drives the classifier.

Rollouts are batched: every episode in a batch shares one tape, and the
per-episode :class:`Trajectory` views are carved out of the batch on demand.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tape as tp
from .env import ActionSet, GridGeometry, ObjectInstance, ViewPointer, apply_actions
from .errors import ContractError, FormatError, VersionError

ParamSet = dict  # name -> float64 ndarray

PARAM_ORDER = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "act_embed", "fuse_w", "fuse_b",
               "rnn_wx", "rnn_wh", "rnn_b", "pol_w", "pol_b", "cls_w", "cls_b")
HEAD_PARAMS = ("cls_w", "cls_b")

CHECKPOINT_MAGIC = b"MVCKPT"
CHECKPOINT_VERSION = 1

MODES = ("sample", "argmax", "forced")
POLICIES = ("learned", "uniform", "largest")


@dataclass(frozen=True)
class AgentDims:
    feature_dim: int = 16
    hidden: int = 32
    embed: int = 8
    num_actions: int = 9
    num_classes: int = 5

    def shapes(self) -> dict[str, tuple[int, ...]]:
        D, H, Ha, nA, N = (self.feature_dim, self.hidden, self.embed, self.num_actions,
                           self.num_classes)
        return {
            "enc_w1": (D, H), "enc_b1": (H,), "enc_w2": (H, H), "enc_b2": (H,),
            "act_embed": (nA, Ha), "fuse_w": (H + Ha, H), "fuse_b": (H,),
            "rnn_wx": (H, H), "rnn_wh": (H, H), "rnn_b": (H,),
            "pol_w": (H, nA), "pol_b": (nA,), "cls_w": (H, N), "cls_b": (N,),
        }


@dataclass(frozen=True)
class EpisodeConfig:
    T: int = 3
    initial_view: str | tuple[int, int] = "random"
    rng_seed: int | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ContractError(f"glimpse budget T must be >= 1, got {self.T}")


def _affine(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_params(rng: np.random.Generator, dims: AgentDims) -> ParamSet:
    """Affine weights ~ U(+-1/sqrt(fan_in)), biases 0, embedding rows ~ N(0, 0.01)."""
    theta = {}
    for name, shape in dims.shapes().items():
        if name == "act_embed":
            theta[name] = rng.normal(0.0, 0.1, shape)
        elif len(shape) == 1:
            theta[name] = np.zeros(shape)
        else:
            theta[name] = _affine(rng, shape[0], shape)
    return theta


def fresh_head(rng: np.random.Generator, theta: ParamSet, num_classes: int) -> ParamSet:
    """Copy of ``theta`` with a newly initialised ``num_classes``-way classifier head."""
    out = {k: v.copy() for k, v in theta.items()}
    H = theta["cls_w"].shape[0]
    out["cls_w"] = _affine(rng, H, (H, num_classes))
    out["cls_b"] = np.zeros(num_classes)
    return out


def dims_of(theta: ParamSet) -> AgentDims:
    D, H = theta["enc_w1"].shape
    nA, Ha = theta["act_embed"].shape
    return AgentDims(D, H, Ha, nA, theta["cls_w"].shape[1])


def param_digest(theta: ParamSet) -> str:
    h = hashlib.sha256()
    for name in sorted(theta):
        h.update(name.encode())
        h.update(np.ascontiguousarray(theta[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _check_dist(dist: np.ndarray) -> None:
    if np.any(dist < 0) or np.any(np.abs(dist.sum(axis=-1) - 1.0) > 1e-8):
        raise ContractError("action distribution is not normalized")


def sample_action(dist, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from ``dist`` over the stable action ordering."""
    dist = np.asarray(dist, dtype=np.float64)
    _check_dist(dist)
    u = rng.random()
    return min(int(np.sum(np.cumsum(dist) <= u)), len(dist) - 1)


def sample_actions(dists: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Row-wise :func:`sample_action`: one uniform per row, drawn in row order."""
    _check_dist(dists)
    u = rng.random(dists.shape[0])
    idx = np.sum(np.cumsum(dists, axis=1) <= u[:, None], axis=1)
    return np.minimum(idx, dists.shape[1] - 1)


@dataclass
class Trajectory:
    """One episode.  The ``*_node`` fields live on the rollout's tape."""
    states: list[np.ndarray]
    actions: list[int]
    views: list[ViewPointer]
    action_logprobs: list[float]
    action_dists: list[np.ndarray]
    final_logits: np.ndarray
    predicted_label: int
    true_label: int
    reward: float
    final_logp_node: tp.Node
    step_logp_nodes: list[tp.Node]

    @property
    def T(self) -> int:
        return len(self.states)


@dataclass
class EpisodeBatch:
    """Batch-level record of a rollout over ``B`` episodes."""
    tape: tp.Tape
    params: dict[str, tp.Node]
    labels: np.ndarray            # (B,)
    views: np.ndarray             # (B, T, 2)
    actions: np.ndarray           # (B, T-1)
    states: list[np.ndarray]      # T x (B, H)
    step_logp: list[tp.Node]      # T-1 x (B, |A|)
    final_logits: np.ndarray      # (B, N)
    final_logp: tp.Node           # (B, N)
    predicted: np.ndarray
    rewards: np.ndarray
    policy: str

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def T(self) -> int:
        return len(self.states)

    def step_dists(self) -> list[np.ndarray]:
        return [np.exp(n.value) for n in self.step_logp]

    def mean_entropy(self) -> float:
        """Average policy entropy over all decision steps (nan when T == 1)."""
        if not self.step_logp:
            return float("nan")
        ents = []
        for n in self.step_logp:
            p = np.exp(n.value)
            plogp = np.where(p > 0, p * np.where(np.isfinite(n.value), n.value, 0.0), 0.0)
            ents.append(-plogp.sum(axis=1).mean())
        return float(np.mean(ents))

    def trajectory(self, b: int) -> Trajectory:
        step_nodes = [tp.row(n, b) for n in self.step_logp]
        acts = [int(x) for x in self.actions[b]]
        return Trajectory(
            states=[s[b].copy() for s in self.states],
            actions=acts,
            views=[ViewPointer(int(e), int(a)) for e, a in self.views[b]],
            action_logprobs=[float(n.value[a]) for n, a in zip(step_nodes, acts)],
            action_dists=[np.exp(n.value) for n in step_nodes],
            final_logits=self.final_logits[b].copy(),
            predicted_label=int(self.predicted[b]),
            true_label=int(self.labels[b]),
            reward=float(self.rewards[b]),
            final_logp_node=tp.row(self.final_logp, b),
            step_logp_nodes=step_nodes,
        )

    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(b) for b in range(self.size)]


def _features_of(objs) -> np.ndarray:
    if isinstance(objs, np.ndarray):
        return objs
    return np.stack([o.grid.features for o in objs])


def rollout_batch(theta: ParamSet, objs, labels: Sequence[int], starts, T: int,
                  action_set: ActionSet, mode: str = "sample", policy: str = "learned",
                  rng: np.random.Generator | None = None, forced=None,
                  tape: tp.Tape | None = None) -> EpisodeBatch:
    """Run ``len(objs)`` episodes in lockstep on one tape.

    ``objs`` is a list of :class:`ObjectInstance` (or a ``(B, E, A, D)``
    feature array), ``starts`` a ``(B, 2)`` array of initial ``(e, a)``.
    ``mode`` picks actions by sampling, argmax (lowest index on ties) or from
    ``forced`` (a ``(B, T-1)`` index array).  ``policy`` swaps the learned
    policy head for a uniform or a fixed largest-move policy.
    """
    if mode not in MODES:
        raise ContractError(f"unknown rollout mode {mode!r}")
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}")
    if T < 1:
        raise ContractError(f"glimpse budget T must be >= 1, got {T}")
    feats = _features_of(objs)
    B, E, A, _ = feats.shape
    geometry = GridGeometry(E, A, feats.shape[3])
    labels = np.asarray(labels, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64).reshape(B, 2)
    nA = len(action_set)
    if theta["act_embed"].shape[0] != nA:
        raise ContractError(f"parameters expect {theta['act_embed'].shape[0]} actions, "
                            f"action set has {nA}")
    N = theta["cls_w"].shape[1]
    if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= N:
        raise ContractError(f"labels must be {B} integers in [0, {N})")
    if mode == "forced":
        forced = np.asarray(forced, dtype=np.int64).reshape(B, T - 1)
        if forced.size and (forced.min() < 0 or forced.max() >= nA):
            raise IndexError(f"forced action index outside [0, {nA})")
    if mode == "sample" and rng is None and (T > 1):
        raise ContractError("sample mode needs an rng")

    tape = tape or tp.Tape()
    P = tape.params(theta)
    e, a = starts[:, 0].copy(), starts[:, 1].copy()
    prev = np.full(B, action_set.noop_index, dtype=np.int64)
    h = tape.constant(np.zeros((B, theta["rnn_wh"].shape[0])))
    views = np.empty((B, T, 2), dtype=np.int64)
    actions = np.empty((B, T - 1), dtype=np.int64)
    states, step_logp = [], []
    uniform_logp = np.full((B, nA), -np.log(nA))
    largest = action_set.largest_index

    for t in range(T):
        views[:, t, 0], views[:, t, 1] = e, a
        x = tape.constant(feats[np.arange(B), e, a])
        v = tp.tanh(tp.add_bias(tp.matmul(x, P["enc_w1"]), P["enc_b1"]))
        v = tp.tanh(tp.add_bias(tp.matmul(v, P["enc_w2"]), P["enc_b2"]))
        emb = tp.gather_rows(P["act_embed"], prev)
        u = tp.tanh(tp.add_bias(tp.matmul(tp.concat(v, emb), P["fuse_w"]), P["fuse_b"]))
        pre = tp.add(tp.matmul(u, P["rnn_wx"]), tp.matmul(h, P["rnn_wh"]))
        h = tp.tanh(tp.add_bias(pre, P["rnn_b"]))
        states.append(h.value)
        if t == T - 1:
            break
        if policy == "learned":
            logp = tp.log_softmax(tp.add_bias(tp.matmul(h, P["pol_w"]), P["pol_b"]))
        elif policy == "uniform":
            logp = tape.constant(uniform_logp)
        else:
            onehot = np.full((B, nA), -np.inf)
            onehot[:, largest] = 0.0
            logp = tape.constant(onehot)
        step_logp.append(logp)
        if mode == "forced":
            act = forced[:, t]
        elif mode == "argmax":
            act = np.argmax(logp.value, axis=1)
        else:
            act = sample_actions(np.exp(logp.value), rng)
        actions[:, t] = act
        e, a = apply_actions(e, a, act, action_set, geometry)
        prev = act

    logits = tp.add_bias(tp.matmul(h, P["cls_w"]), P["cls_b"])
    final_logp = tp.log_softmax(logits)
    predicted = np.argmax(logits.value, axis=1)
    return EpisodeBatch(tape, P, labels, views, actions, states, step_logp, logits.value,
                        final_logp, predicted, (predicted == labels).astype(np.float64), policy)


def initial_view(cfg: EpisodeConfig, geometry: GridGeometry,
                 rng: np.random.Generator | None) -> ViewPointer:
    if cfg.initial_view == "random":
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        return ViewPointer(int(rng.integers(geometry.elevations)),
                           int(rng.integers(geometry.azimuths)))
    p = ViewPointer(*cfg.initial_view)
    if not (0 <= p.e < geometry.elevations and 0 <= p.a < geometry.azimuths):
        raise IndexError(f"initial view {tuple(p)} outside the grid")
    return p


def rollout(theta: ParamSet, obj: ObjectInstance, task_label: int, cfg: EpisodeConfig,
            action_set: ActionSet, mode: str = "sample", forced_actions=None,
            rng: np.random.Generator | None = None, policy: str = "learned",
            tape: tp.Tape | None = None) -> Trajectory:
    """Single-episode rollout; see :func:`rollout_batch`."""
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    if mode == "forced":
        if forced_actions is None or len(forced_actions) != cfg.T - 1:
            raise ContractError(f"forced mode needs exactly {cfg.T - 1} actions")
    start = initial_view(cfg, obj.grid.geometry, rng)
    batch = rollout_batch(theta, [obj], [task_label], [tuple(start)], cfg.T, action_set,
                          mode=mode, policy=policy, rng=rng,
                          forced=None if forced_actions is None else [list(forced_actions)],
                          tape=tape)
    return batch.trajectory(0)


def save_checkpoint(theta: ParamSet, path, config_echo: dict | None = None) -> None:
    names = [n for n in PARAM_ORDER if n in theta] + sorted(set(theta) - set(PARAM_ORDER))
    header = {
        "dims": dataclasses.asdict(dims_of(theta)),
        "config": config_echo or {},
        "tensors": [{"name": n, "shape": list(theta[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(theta[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    """Returns ``(theta, header)``; the header carries dims and the config echo."""
    data = Path(path).read_bytes()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    try:
        version, hlen = struct.unpack_from("<HI", data, off)
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: checkpoint version {version}, "
                               f"this build reads {CHECKPOINT_VERSION}")
        off += struct.calcsize("<HI")
        header = json.loads(data[off: off + hlen].decode())
        off += hlen
        theta = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape)) if shape else 1
            if off + 8 * count > len(data):
                raise FormatError(f"{path}: truncated tensor {t['name']}")
            theta[t["name"]] = np.frombuffer(data, "<f8", count, off).astype(np.float64).reshape(shape)
            off += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: cannot parse checkpoint ({exc})") from exc
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return theta, header
