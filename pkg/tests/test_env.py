import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metaview.env import (Action, ActionSet, Dataset, GeneratorConfig, GridGeometry, Observation,
                          ViewPointer, apply_action, apply_actions, generate_dataset,
                          load_dataset, observe, save_dataset)
from metaview.errors import ConfigError, FormatError, VersionError

G = GridGeometry()


def small_cfg(**kw):
    base = dict(num_categories=4, instances_per_category=3, seed=7)
    base.update(kw)
    return GeneratorConfig(**base)


def test_geometry_defaults_and_validation():
    assert (G.elevations, G.azimuths, G.feature_dim) == (5, 6, 16)
    assert G.num_cells == 30
    for bad in [dict(elevations=0), dict(azimuths=1), dict(feature_dim=0)]:
        with pytest.raises(ConfigError):
            GridGeometry(**bad)


def test_action_set_lexicographic_and_size():
    a = ActionSet()
    assert len(a) == 9
    assert list(a.actions) == sorted(a.actions)
    assert a[a.noop_index] == Action(0, 0)
    b = ActionSet(2, 1)
    assert len(b) == (2 * 2 + 1) * (2 * 1 + 1)
    assert Action(0, 0) in b.actions
    assert ActionSet(2, 1).actions == b.actions  # stable indices


def test_largest_action_tie_rule():
    assert ActionSet()[ActionSet().largest_index] == Action(1, 1)
    assert ActionSet(2, 3)[ActionSet(2, 3).largest_index] == Action(2, 3)
    assert ActionSet(0, 1)[ActionSet(0, 1).largest_index] == Action(0, 1)


def test_action_index_unknown():
    with pytest.raises(IndexError):
        ActionSet().index((2, 0))
    with pytest.raises(ConfigError):
        ActionSet(-1, 1)


def test_apply_action_examples():
    assert apply_action(ViewPointer(0, 5), (0, 1), G) == ViewPointer(0, 0)
    assert apply_action(ViewPointer(4, 2), (1, 0), G) == ViewPointer(4, 2)
    assert apply_action(ViewPointer(2, 3), (0, 0), G) == ViewPointer(2, 3)


def test_azimuth_cycle_and_elevation_stall():
    p = ViewPointer(1, 2)
    for step in range(1, G.azimuths + 1):
        p = apply_action(p, (0, 1), G)
        assert (p == ViewPointer(1, 2)) == (step == G.azimuths)
    p = ViewPointer(0, 0)
    seen = []
    for _ in range(8):
        p = apply_action(p, (1, 0), G)
        seen.append(p.e)
    assert seen[G.elevations - 2:] == [G.elevations - 1] * (8 - G.elevations + 2)


@given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 2), st.integers(0, 3))
def test_apply_action_always_in_range(E, A, re, ra):
    g = GridGeometry(E, A, 2)
    acts = ActionSet(re, ra)
    for e in range(E):
        for a in range(A):
            for act in acts.actions:
                q = apply_action(ViewPointer(e, a), act, g)
                assert 0 <= q.e < E and 0 <= q.a < A


def test_vectorized_apply_matches_scalar():
    acts = ActionSet(1, 2)
    e, a = np.meshgrid(np.arange(5), np.arange(6), indexing="ij")
    e, a = e.ravel(), a.ravel()
    for i in range(len(acts)):
        ve, va = apply_actions(e, a, np.full(e.size, i), acts, G)
        for k in range(e.size):
            assert apply_action(ViewPointer(e[k], a[k]), acts[i], G) == ViewPointer(ve[k], va[k])


def test_generator_validation():
    with pytest.raises(ConfigError):
        generate_dataset(small_cfg(informative_cells=0), G)
    with pytest.raises(ConfigError):
        generate_dataset(small_cfg(informative_cells=31), G)
    with pytest.raises(ConfigError):
        generate_dataset(small_cfg(signal_scale=-1.0), G)
    with pytest.raises(ConfigError):
        generate_dataset(small_cfg(view_consistency=1.5), G)
    with pytest.raises(ConfigError):
        generate_dataset(small_cfg(seed=-1), G)


def test_generation_is_deterministic_bytewise():
    a = generate_dataset(small_cfg(), G)
    b = generate_dataset(small_cfg(), G)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.equals(b)
    c = generate_dataset(small_cfg(seed=8), G)
    assert not a.equals(c)


def test_dataset_structure_and_immutability():
    ds = generate_dataset(small_cfg(), G)
    assert len(ds) == 12 and ds.categories == [0, 1, 2, 3]
    assert ds.features.shape == (12, 5, 6, 16)
    assert np.all(np.isfinite(ds.features))
    assert [o.object_id for o in ds.objects] == list(range(12))
    assert all(len(v) == 3 for v in ds.informative.values())
    with pytest.raises(ValueError):
        ds.features[0, 0, 0, 0] = 1.0


def test_degenerate_config_makes_all_objects_identical():
    ds = generate_dataset(small_cfg(signal_scale=0.0, instance_noise=0.0,
                                    instance_signal_cells=0), G)
    assert np.all(ds.features == ds.features[0])


def test_observe():
    ds = generate_dataset(small_cfg(), G)
    obj = ds[5]
    o = observe(obj, ViewPointer(3, 4), ActionSet().noop_index)
    assert isinstance(o, Observation)
    assert np.array_equal(o.features, obj.grid.features[3, 4])
    assert o.prev_action == ActionSet().index((0, 0))
    again = observe(obj, ViewPointer(3, 4), ActionSet().noop_index)
    assert np.array_equal(o.features, again.features) and o.prev_action == again.prev_action


def test_informative_cells_carry_more_between_category_distance():
    # per draw: between-category distance at each category's informative cells vs at cells no
    # category (nor its neighbours) uses; one-sided sign test over 1000 draws
    cfg = GeneratorConfig(num_categories=2, instances_per_category=1)
    wins = 0
    n = 1000
    for s in range(n):
        ds = generate_dataset(dataclasses.replace(cfg, seed=s), G)
        f = ds.features.reshape(2, 30, 16)
        used = set(ds.informative[0]) | set(ds.informative[1])
        near = set()
        for c in used:
            e, a = divmod(c, 6)
            near |= {e * 6 + (a + 1) % 6, e * 6 + (a - 1) % 6}
            near |= {(e + d) * 6 + a for d in (-1, 1) if 0 <= e + d < 5}
        bg = [c for c in range(30) if c not in used | near]
        d = np.linalg.norm(f[0] - f[1], axis=1)
        if bg and d[sorted(used)].mean() > d[bg].mean():
            wins += 1
    from scipy.stats import binomtest
    assert binomtest(wins, n, 0.5, alternative="greater").pvalue < 0.01


def test_round_trip_lossless(tmp_path):
    ds = generate_dataset(small_cfg(), G)
    path = tmp_path / "d.mvg"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.equals(ds)
    assert back.informative == ds.informative


def test_regen_mode_stores_header_only(tmp_path):
    ds = generate_dataset(small_cfg(), G)
    full, slim = tmp_path / "full.mvg", tmp_path / "slim.mvg"
    save_dataset(ds, full)
    save_dataset(ds, slim, regen_from_seed=True)
    assert slim.stat().st_size < full.stat().st_size / 10
    assert load_dataset(slim).equals(ds)


def test_truncated_file_is_a_format_error(tmp_path):
    ds = generate_dataset(small_cfg(), G)
    path = tmp_path / "d.mvg"
    save_dataset(ds, path)
    data = path.read_bytes()
    for cut in (8, 20, len(data) - 5):
        bad = tmp_path / f"cut{cut}.mvg"
        bad.write_bytes(data[:cut])
        with pytest.raises(FormatError):
            load_dataset(bad)


def test_magic_and_version_mismatch(tmp_path):
    ds = generate_dataset(small_cfg(), G)
    path = tmp_path / "d.mvg"
    save_dataset(ds, path)
    data = bytearray(path.read_bytes())
    wrong_magic = tmp_path / "m.mvg"
    wrong_magic.write_bytes(b"XXXXXX" + bytes(data[6:]))
    with pytest.raises(VersionError):
        load_dataset(wrong_magic)
    data[6] = 99  # version field, little-endian u16 after the magic
    wrong_version = tmp_path / "v.mvg"
    wrong_version.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        load_dataset(wrong_version)


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_dataset(tmp_path / "nope.mvg")


def test_unknown_category_has_no_instances():
    ds = generate_dataset(small_cfg(), G)
    assert isinstance(ds, Dataset)
    assert ds.instances_of(99) == []
