import numpy as np
import pytest
from scipy.stats import chisquare

from metaview import tape as tp
from metaview.agent import (AgentDims, EpisodeConfig, dims_of, fresh_head, init_params,
                            load_checkpoint, param_digest, rollout, rollout_batch, sample_action,
                            sample_actions, save_checkpoint)
from metaview.env import ActionSet, GeneratorConfig, GridGeometry, ViewPointer, generate_dataset
from metaview.errors import ContractError, FormatError, VersionError
from metaview.losses import LossWeights, total_loss

ACTS = ActionSet()


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(GeneratorConfig(num_categories=3, instances_per_category=2, seed=3),
                            GridGeometry())


@pytest.fixture()
def theta():
    return init_params(np.random.default_rng(0), AgentDims())


def test_param_shapes(theta):
    d = AgentDims()
    assert {k: v.shape for k, v in theta.items()} == d.shapes()
    assert theta["fuse_w"].shape == (32 + 8, 32)
    assert dims_of(theta) == d


def test_init_deterministic_and_bias_zero():
    a = init_params(np.random.default_rng(5), AgentDims())
    b = init_params(np.random.default_rng(5), AgentDims())
    assert param_digest(a) == param_digest(b)
    for name, v in a.items():
        if name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2"):
            assert np.all(v == 0), name
    bound = 1 / np.sqrt(16)
    assert np.abs(a["enc_w1"]).max() <= bound
    assert 0.05 < a["act_embed"].std() < 0.2  # N(0, 0.01) variance


def test_zero_weights_give_uniform_distributions(ds):
    zero = {k: np.zeros_like(v) for k, v in init_params(np.random.default_rng(0), AgentDims()).items()}
    traj = rollout(zero, ds[0], 1, EpisodeConfig(T=3, initial_view=(0, 0)), ACTS, mode="argmax")
    for dist in traj.action_dists:
        assert np.allclose(dist, 1 / 9, atol=1e-15)
    assert np.allclose(np.exp(traj.final_logp_node.value), 1 / 5, atol=1e-15)


def test_fresh_head_resizes_only_the_classifier(theta):
    out = fresh_head(np.random.default_rng(1), theta, 30)
    assert out["cls_w"].shape == (32, 30) and out["cls_b"].shape == (30,)
    for k in theta:
        if k not in ("cls_w", "cls_b"):
            assert np.array_equal(out[k], theta[k])


def test_t1_episode_has_no_actions(theta, ds):
    traj = rollout(theta, ds[0], 0, EpisodeConfig(T=1, initial_view=(2, 2)), ACTS)
    assert traj.actions == [] and traj.T == 1 and len(traj.states) == 1
    assert traj.action_dists == []


def test_trajectory_length_contract(theta, ds):
    rng = np.random.default_rng(2)
    for T in (1, 2, 3, 5):
        traj = rollout(theta, ds[1], 2, EpisodeConfig(T=T), ACTS, rng=rng)
        assert len(traj.actions) == T - 1 and len(traj.states) == T and len(traj.views) == T
        for dist in traj.action_dists:
            assert abs(dist.sum() - 1) <= 1e-10 and np.all(dist >= 0)
        assert traj.reward == float(traj.predicted_label == traj.true_label)


def test_argmax_rollout_is_pure(theta, ds):
    cfg = EpisodeConfig(T=4, initial_view=(1, 3))
    a = rollout(theta, ds[2], 1, cfg, ACTS, mode="argmax")
    b = rollout(theta, ds[2], 1, cfg, ACTS, mode="argmax")
    assert a.actions == b.actions and a.views == b.views
    assert np.array_equal(a.final_logits, b.final_logits)


def test_forced_noop_keeps_initial_view(theta, ds):
    noop = ACTS.noop_index
    traj = rollout(theta, ds[0], 0, EpisodeConfig(T=4, initial_view=(3, 1)), ACTS,
                   mode="forced", forced_actions=[noop] * 3)
    assert traj.views == [ViewPointer(3, 1)] * 4


def test_forced_action_out_of_range(theta, ds):
    with pytest.raises(IndexError):
        rollout(theta, ds[0], 0, EpisodeConfig(T=3, initial_view=(0, 0)), ACTS,
                mode="forced", forced_actions=[0, 9])


def test_initial_view_out_of_grid(theta, ds):
    with pytest.raises(IndexError):
        rollout(theta, ds[0], 0, EpisodeConfig(T=2, initial_view=(5, 0)), ACTS, mode="argmax")


def test_label_out_of_range(theta, ds):
    with pytest.raises(ContractError):
        rollout(theta, ds[0], 5, EpisodeConfig(T=2, initial_view=(0, 0)), ACTS, mode="argmax")


def test_views_follow_geometry(theta, ds):
    traj = rollout(theta, ds[0], 0, EpisodeConfig(T=4, initial_view=(4, 5)), ACTS,
                   mode="forced", forced_actions=[ACTS.index((1, 1))] * 3)
    assert traj.views == [ViewPointer(4, 5), ViewPointer(4, 0), ViewPointer(4, 1),
                          ViewPointer(4, 2)]


def test_batch_matches_single_episodes(theta, ds):
    feats = np.stack([ds[i].grid.features for i in range(4)])
    starts = np.array([[0, 0], [1, 2], [4, 5], [2, 3]])
    forced = np.array([[0, 8], [4, 4], [2, 6], [8, 1]])
    batch = rollout_batch(theta, feats, [0, 1, 2, 3], starts, 3, ACTS, mode="forced",
                          forced=forced)
    for b in range(4):
        single = rollout(theta, ds[b], b, EpisodeConfig(T=3, initial_view=tuple(starts[b])), ACTS,
                         mode="forced", forced_actions=forced[b])
        tb = batch.trajectory(b)
        assert np.allclose(tb.final_logits, single.final_logits, atol=1e-12)
        assert tb.actions == single.actions and tb.views == single.views


def test_gradient_reaches_encoder_through_all_steps(theta, ds):
    traj = rollout(theta, ds[0], 1, EpisodeConfig(T=3, initial_view=(2, 2)), ACTS,
                   mode="forced", forced_actions=[1, 7])
    tape = traj.final_logp_node.tape
    g = tape.backward(total_loss(traj, LossWeights()))
    for name in ("enc_w1", "enc_w2", "act_embed", "fuse_w", "rnn_wx", "rnn_wh", "pol_w", "cls_w"):
        assert np.abs(g[name]).max() > 0, name


def test_uniform_and_largest_policies(theta, ds):
    rng = np.random.default_rng(4)
    feats = np.stack([ds[0].grid.features] * 3)
    starts = np.array([[0, 0]] * 3)
    b = rollout_batch(theta, feats, [0, 0, 0], starts, 4, ACTS, policy="largest", mode="argmax")
    assert np.all(b.actions == ACTS.largest_index)
    assert np.all(b.views[0] == [[0, 0], [1, 1], [2, 2], [3, 3]])
    u = rollout_batch(theta, feats, [0, 0, 0], starts, 3, ACTS, policy="uniform", rng=rng)
    assert np.allclose(np.exp(u.step_logp[0].value), 1 / 9)


def test_sample_action_one_hot_and_reproducible():
    rng = np.random.default_rng(0)
    onehot = np.zeros(9)
    onehot[4] = 1.0
    assert all(sample_action(onehot, rng) == 4 for _ in range(100))
    a = [sample_action(np.full(9, 1 / 9), np.random.default_rng(11)) for _ in range(5)]
    b = [sample_action(np.full(9, 1 / 9), np.random.default_rng(11)) for _ in range(5)]
    assert a == b


def test_sample_action_rejects_unnormalized():
    with pytest.raises(ContractError):
        sample_action(np.full(9, 0.2), np.random.default_rng(0))
    with pytest.raises(ContractError):
        sample_actions(np.full((2, 3), 0.5), np.random.default_rng(0))


def test_sample_action_matches_vectorized_form():
    rng = np.random.default_rng(1)
    dists = rng.dirichlet(np.ones(9), size=50)
    seq = [sample_action(d, np.random.default_rng(i)) for i, d in enumerate(dists)]
    vec = [int(sample_actions(d[None], np.random.default_rng(i))[0]) for i, d in enumerate(dists)]
    assert seq == vec


def test_uniform_sampling_frequencies():
    n = 1_000_000
    rng = np.random.default_rng(123)
    idx = sample_actions(np.full((n, 9), 1 / 9), rng)
    freq = np.bincount(idx, minlength=9) / n
    sigma = np.sqrt((1 / 9) * (8 / 9) / n)
    assert np.all(np.abs(freq - 1 / 9) <= 3 * sigma)
    assert chisquare(np.bincount(idx, minlength=9)).pvalue > 1e-3


def test_checkpoint_round_trip(tmp_path, theta):
    path = tmp_path / "a.ckpt"
    save_checkpoint(theta, path, {"note": "x"})
    back, header = load_checkpoint(path)
    assert param_digest(back) == param_digest(theta)
    assert header["config"] == {"note": "x"}
    assert header["dims"]["hidden"] == 32
    save_checkpoint(back, tmp_path / "b.ckpt", {"note": "x"})
    assert (tmp_path / "b.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path, theta):
    path = tmp_path / "a.ckpt"
    save_checkpoint(theta, path)
    data = path.read_bytes()
    (tmp_path / "bad_magic.ckpt").write_bytes(b"NOTCKP" + data[6:])
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "bad_magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(data[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(data + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "long.ckpt")


def test_rollout_shares_caller_tape(theta, ds):
    t = tp.Tape()
    traj = rollout(theta, ds[0], 0, EpisodeConfig(T=2, initial_view=(0, 0)), ACTS,
                   mode="argmax", tape=t)
    assert traj.final_logp_node.tape is t
