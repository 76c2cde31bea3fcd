"""Synthetic view-grid world.

Every object is an ``E x A`` grid of ``D``-dimensional view features.  Class
evidence sits in a few sparse cells; everything else is a background field
that all objects share, so a background cell tells the agent *where* it is
looking but not *what* it is looking at.  Cameras move on the grid with
azimuth wrap-around and clamped elevation.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FormatError, VersionError

DATASET_MAGIC = b"MVGRID"
DATASET_VERSION = 1
_FLAG_REGEN = 1


@dataclass(frozen=True)
class GridGeometry:
    elevations: int = 5
    azimuths: int = 6
    feature_dim: int = 16

    def __post_init__(self):
        if self.elevations < 1 or self.azimuths < 2 or self.feature_dim < 1:
            raise ConfigError(
                f"invalid geometry E={self.elevations} A={self.azimuths} D={self.feature_dim}"
                " (need E>=1, A>=2, D>=1)")

    @property
    def num_cells(self) -> int:
        return self.elevations * self.azimuths


class ViewPointer(NamedTuple):
    e: int
    a: int


class Action(NamedTuple):
    d_elev: int
    d_azim: int


class ActionSet:
    """All ``(d_elev, d_azim)`` shifts within the radii, in lexicographic order."""

    def __init__(self, radius_e: int = 1, radius_a: int = 1):
        if radius_e < 0 or radius_a < 0:
            raise ConfigError(f"action radii must be >= 0, got ({radius_e}, {radius_a})")
        self.radius_e = int(radius_e)
        self.radius_a = int(radius_a)
        self.actions: tuple[Action, ...] = tuple(
            Action(de, da)
            for de in range(-self.radius_e, self.radius_e + 1)
            for da in range(-self.radius_a, self.radius_a + 1))
        self._index = {act: i for i, act in enumerate(self.actions)}
        self.d_elev = np.array([act.d_elev for act in self.actions], dtype=np.int64)
        self.d_azim = np.array([act.d_azim for act in self.actions], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> Action:
        return self.actions[i]

    def __eq__(self, other) -> bool:
        return (isinstance(other, ActionSet)
                and (self.radius_e, self.radius_a) == (other.radius_e, other.radius_a))

    def __repr__(self) -> str:
        return f"ActionSet(radius_e={self.radius_e}, radius_a={self.radius_a})"

    def index(self, act) -> int:
        act = Action(*act)
        if act not in self._index:
            raise IndexError(f"action {tuple(act)} is not in {self!r}")
        return self._index[act]

    @property
    def noop_index(self) -> int:
        return self._index[Action(0, 0)]

    @property
    def largest_index(self) -> int:
        """The biggest move by |d_elev| + |d_azim|; ties go to the lexicographically last."""
        return max(range(len(self)),
                   key=lambda i: (abs(self.actions[i].d_elev) + abs(self.actions[i].d_azim),
                                  self.actions[i]))


def apply_action(p: ViewPointer, act, g: GridGeometry) -> ViewPointer:
    de, da = act
    e = min(max(p.e + de, 0), g.elevations - 1)
    return ViewPointer(e, (p.a + da) % g.azimuths)


def apply_actions(e: np.ndarray, a: np.ndarray, idx: np.ndarray, actions: ActionSet,
                  g: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`apply_action` over arrays of pointers and action indices."""
    e = np.clip(e + actions.d_elev[idx], 0, g.elevations - 1)
    a = (a + actions.d_azim[idx]) % g.azimuths
    return e, a


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic object generator.

    ``salience`` concentrates the placement of informative cells around
    ``salient_elevation`` (weight ``exp(-salience * |e - e_s|)``); 0 places
    them uniformly.  ``view_consistency`` is how strongly the directions of a
    category's informative cells agree (1: one shared direction, 0:
    independent).  ``spread`` is the fraction of a planted signal that leaks
    into the 4 neighbouring views.  ``smoothing`` blends each background cell
    with its neighbours (0 = off).
    """
    num_categories: int = 40
    instances_per_category: int = 10
    informative_cells: int = 3
    signal_scale: float = 2.0
    instance_noise: float = 0.25
    background_noise: float = 0.25
    instance_signal_cells: int = 2
    salience: float = 2.0
    salient_elevation: int | None = None
    view_consistency: float = 1.0
    spread: float = 0.5
    smoothing: float = 0.0
    seed: int = 0

    def validate(self, g: GridGeometry) -> None:
        if self.num_categories < 1 or self.instances_per_category < 1:
            raise ConfigError("need at least one category and one instance per category")
        if not 1 <= self.informative_cells <= g.num_cells:
            raise ConfigError(f"informative_cells={self.informative_cells} outside [1, {g.num_cells}]")
        if not 0 <= self.instance_signal_cells <= g.num_cells:
            raise ConfigError(f"instance_signal_cells={self.instance_signal_cells} outside [0, {g.num_cells}]")
        for name in ("signal_scale", "instance_noise", "background_noise", "salience", "spread"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.view_consistency <= 1:
            raise ConfigError(f"view_consistency must lie in [0, 1], got {self.view_consistency}")
        if not 0 <= self.smoothing < 1:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.salient_elevation is not None and not 0 <= self.salient_elevation < g.elevations:
            raise ConfigError(f"salient_elevation={self.salient_elevation} outside the grid")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass(frozen=True)
class ViewGrid:
    geometry: GridGeometry
    features: np.ndarray  # (E, A, D)


@dataclass(frozen=True)
class ObjectInstance:
    object_id: int
    category_id: int
    grid: ViewGrid


class Observation(NamedTuple):
    features: np.ndarray
    prev_action: int


def observe(obj: ObjectInstance, p: ViewPointer, prev_action_index: int) -> Observation:
    return Observation(obj.grid.features[p.e, p.a], int(prev_action_index))


@dataclass
class Dataset:
    geometry: GridGeometry
    config: GeneratorConfig
    features: np.ndarray          # (num_objects, E, A, D)
    category_ids: np.ndarray      # (num_objects,)
    informative: dict[int, list[int]] = field(default_factory=dict)  # category -> flat cells

    def __post_init__(self):
        self.features.setflags(write=False)
        self.category_ids.setflags(write=False)
        self._by_category: dict[int, list[int]] = {}
        for i, c in enumerate(self.category_ids.tolist()):
            self._by_category.setdefault(c, []).append(i)

    def __len__(self) -> int:
        return len(self.category_ids)

    def __getitem__(self, object_id: int) -> ObjectInstance:
        return ObjectInstance(int(object_id), int(self.category_ids[object_id]),
                              ViewGrid(self.geometry, self.features[object_id]))

    @property
    def objects(self) -> list[ObjectInstance]:
        return [self[i] for i in range(len(self))]

    @property
    def categories(self) -> list[int]:
        return sorted(self._by_category)

    def instances_of(self, category_id: int) -> list[int]:
        return list(self._by_category.get(int(category_id), []))

    def equals(self, other: "Dataset") -> bool:
        return (self.geometry == other.geometry and self.config == other.config
                and np.array_equal(self.category_ids, other.category_ids)
                and self.features.tobytes() == other.features.tobytes())


def _placement_weights(cfg: GeneratorConfig, g: GridGeometry) -> np.ndarray:
    centre = (g.elevations - 1) / 2 if cfg.salient_elevation is None else cfg.salient_elevation
    elev = np.repeat(np.arange(g.elevations), g.azimuths)
    w = np.exp(-cfg.salience * np.abs(elev - centre))
    return w / w.sum()


def _smooth(field_: np.ndarray, weight: float) -> np.ndarray:
    up = np.concatenate([field_[:1], field_[:-1]], axis=0)
    down = np.concatenate([field_[1:], field_[-1:]], axis=0)
    left = np.roll(field_, 1, axis=1)
    right = np.roll(field_, -1, axis=1)
    return (1 - weight) * field_ + weight * (up + down + left + right) / 4


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def _neighbours(g: GridGeometry) -> list[list[int]]:
    out = []
    for e in range(g.elevations):
        for a in range(g.azimuths):
            cells = [e * g.azimuths + (a + da) % g.azimuths for da in (-1, 1)]
            cells += [(e + de) * g.azimuths + a for de in (-1, 1) if 0 <= e + de < g.elevations]
            out.append(cells)
    return out


def _plant(target: np.ndarray, cells, directions, scale: float, spread: float, nbrs) -> None:
    for cell, v in zip(cells, directions):
        target[cell] += scale * v
        if spread:
            for nb in nbrs[cell]:
                target[nb] += spread * scale * v


def _directions(rng, k: int, d: int, consistency: float) -> list[np.ndarray]:
    shared = _unit(rng, d)
    out = []
    for _ in range(k):
        v = np.sqrt(consistency) * shared + np.sqrt(1.0 - consistency) * _unit(rng, d)
        out.append(v / np.linalg.norm(v))
    return out


def generate_dataset(cfg: GeneratorConfig, geometry: GridGeometry) -> Dataset:
    """Draw a dataset; a pure function of ``(cfg, geometry)``.

    All objects share one background field.  Each category adds a signal of
    length ``signal_scale`` at ``informative_cells`` cells (and ``spread`` of
    it at their neighbours).  Instances add i.i.d. Gaussian noise per cell and
    their own signal direction at ``instance_signal_cells`` cells.
    """
    cfg.validate(geometry)
    E, A, D = geometry.elevations, geometry.azimuths, geometry.feature_dim
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    background = rng.normal(0.0, cfg.background_noise, (E * A, D))
    if cfg.smoothing > 0:
        background = _smooth(background.reshape(E, A, D), cfg.smoothing).reshape(E * A, D)
    weights = _placement_weights(cfg, geometry)
    nbrs = _neighbours(geometry)

    n = cfg.num_categories * cfg.instances_per_category
    features = np.empty((n, E * A, D))
    category_ids = np.repeat(np.arange(cfg.num_categories), cfg.instances_per_category)
    informative = {}
    k = 0
    for c in range(cfg.num_categories):
        cells = rng.choice(E * A, cfg.informative_cells, replace=False, p=weights)
        informative[c] = sorted(int(x) for x in cells)
        proto = background.copy()
        _plant(proto, cells, _directions(rng, len(cells), D, cfg.view_consistency),
               cfg.signal_scale, cfg.spread, nbrs)
        for _ in range(cfg.instances_per_category):
            inst = proto + rng.normal(0.0, cfg.instance_noise, (E * A, D))
            if cfg.instance_signal_cells:
                own = rng.choice(E * A, cfg.instance_signal_cells, replace=False, p=weights)
                v = _unit(rng, D)
                _plant(inst, own, [v] * len(own), cfg.signal_scale, cfg.spread, nbrs)
            features[k] = inst
            k += 1
    return Dataset(geometry, cfg, features.reshape(n, E, A, D), category_ids, informative)


def _header(ds: Dataset, regen: bool) -> dict:
    return {
        "geometry": dataclasses.asdict(ds.geometry),
        "num_objects": len(ds),
        "num_categories": len(ds.categories),
        "generator": dataclasses.asdict(ds.config),
        "seed": ds.config.seed,
        "regen_from_seed": regen,
        "informative": {str(c): v for c, v in ds.informative.items()},
    }


def save_dataset(ds: Dataset, path, regen_from_seed: bool = False) -> None:
    """Write ``ds``; with ``regen_from_seed`` only the header is stored."""
    header = json.dumps(_header(ds, regen_from_seed), sort_keys=True).encode()
    g = ds.geometry
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HBI", DATASET_VERSION, _FLAG_REGEN if regen_from_seed else 0,
                             len(header)))
        fh.write(header)
        if regen_from_seed:
            return
        cells = g.num_cells * g.feature_dim
        for i in range(len(ds)):
            fh.write(struct.pack("<qq", i, int(ds.category_ids[i])))
            fh.write(np.ascontiguousarray(ds.features[i], dtype="<f8").reshape(cells).tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise VersionError(f"{path}: not a dataset file (bad magic)")
    off = len(DATASET_MAGIC)
    try:
        version, flags, hlen = struct.unpack_from("<HBI", data, off)
        off += struct.calcsize("<HBI")
        if version != DATASET_VERSION:
            raise VersionError(f"{path}: format version {version}, this build reads {DATASET_VERSION}")
        if off + hlen > len(data):
            raise FormatError(f"{path}: truncated header")
        header = json.loads(data[off: off + hlen].decode())
        off += hlen
        geometry = GridGeometry(**header["geometry"])
        cfg = GeneratorConfig(**header["generator"])
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: cannot parse header ({exc})") from exc

    if flags & _FLAG_REGEN:
        return generate_dataset(cfg, geometry)

    n = header["num_objects"]
    cells = geometry.num_cells * geometry.feature_dim
    rec = 16 + 8 * cells
    if len(data) - off != n * rec:
        raise FormatError(f"{path}: expected {n} records of {rec} bytes, "
                          f"found {len(data) - off} bytes")
    features = np.empty((n, cells))
    category_ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        object_id, category_ids[i] = struct.unpack_from("<qq", data, off)
        if object_id != i:
            raise FormatError(f"{path}: record {i} carries object_id {object_id}")
        features[i] = np.frombuffer(data, dtype="<f8", count=cells, offset=off + 16)
        off += rec
    informative = {int(c): list(v) for c, v in header.get("informative", {}).items()}
    return Dataset(geometry, cfg,
                   features.reshape(n, geometry.elevations, geometry.azimuths, geometry.feature_dim),
                   category_ids, informative)
