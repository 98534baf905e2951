from types import SimpleNamespace

import numpy as np
import pytest

from conftest import H
from gnss.beam import ExcitationSpec, build_beam_model, run_explicit
from gnss.errors import ConfigError, ShapeError
from gnss.trajectory import Trajectory
from gnss.rollout import (
    evaluate,
    rollout,
    rollout_mse,
    segment_ids,
    spatial_rmse,
    temporal_rmse,
)


class SecondDifferenceOracle:
    """Stands in for a trained network: returns the exact ground-truth acceleration."""

    def __init__(self, truth, radius=2 * H, history=4, mode="local"):
        self.truth = truth.local_displacements
        self.config = SimpleNamespace(history=history, radius=radius, mode=mode, num_types=3)
        self.t = history + 1

    def predict(self, window):
        u, t = self.truth, self.t
        self.t += 1
        return (u[t + 1] - u[t]) - (u[t] - u[t - 1])


class ConstantModel:
    def __init__(self, accel, history=4):
        self.accel = accel
        self.config = SimpleNamespace(history=history, radius=2 * H, mode="local", num_types=3)

    def predict(self, window):
        return np.full(window.positions.shape[1:], self.accel)


@pytest.fixture(scope="module")
def long_traj(section):
    return run_explicit(build_beam_model(0.064, H, section, 0.028), ExcitationSpec(), 55e-6, 1e-7)


def test_oracle_closure(long_traj):
    res = rollout(SecondDifferenceOracle(long_traj), long_traj, 500)
    truth = long_traj.local_displacements[:500]
    assert res.positions.shape == truth.shape and not res.diverged
    rel = np.abs(res.positions - truth).max() / np.abs(truth).max()
    assert rel < 1e-10


def test_seed_window_is_bit_exact(long_traj, tiny_model):
    res = rollout(tiny_model, long_traj, 12)
    np.testing.assert_array_equal(res.positions[:6], long_traj.local_displacements[:6])
    assert res.seed_length == 6
    assert len(res.step_times) == 6
    act = long_traj.actuator_node
    np.testing.assert_array_equal(res.positions[:, act], long_traj.local_displacements[:12, act])


def test_seed_only_rollout(long_traj, tiny_model):
    res = rollout(tiny_model, long_traj, 6)
    np.testing.assert_array_equal(res.positions, long_traj.local_displacements[:6])
    assert res.step_times == []


def test_actuator_follows_excitation(long_traj):
    spec = ExcitationSpec()
    res = rollout(ConstantModel(0.0), long_traj, 40, excitation=spec)
    np.testing.assert_array_equal(res.positions[:, long_traj.actuator_node], long_traj.local_displacements[:40, long_traj.actuator_node])


def test_divergence_is_flagged_and_truncated(long_traj):
    peak = np.abs(long_traj.local_displacements[:, long_traj.actuator_node]).max()
    res = rollout(ConstantModel(1e-6), long_traj, 200)
    assert res.diverged
    assert np.abs(res.positions).max() > 1e3 * peak
    assert np.abs(res.positions[:-1]).max() <= 1e3 * peak
    assert res.positions.shape[0] == res.divergence_step + 1 < 200
    res = rollout(ConstantModel(np.nan), long_traj, 200)
    assert res.diverged and res.divergence_step == 6
    assert res.positions.shape[0] == 6 and np.isfinite(res.positions).all()


def test_rollout_rejections(long_traj, tiny_model):
    with pytest.raises(ConfigError):
        rollout(tiny_model, long_traj.truncated(5))
    with pytest.raises(ConfigError):
        rollout(tiny_model, long_traj, long_traj.n_steps + 1)
    odd = SecondDifferenceOracle(long_traj)
    odd.config.num_types = 1
    with pytest.raises(ConfigError, match="node types"):
        rollout(odd, long_traj, 10)


def brute_mse(pred, truth, seed):
    total, count = 0.0, 0
    for t in range(seed, pred.shape[0]):
        for i in range(pred.shape[1]):
            total += float(np.sqrt(sum((pred[t, i, k] - truth[t, i, k]) ** 2 for k in range(2))))
            count += 1
    return total / count


def test_rollout_mse_oracles():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(15, 9, 2))
    pred = truth + rng.normal(scale=0.1, size=truth.shape)
    assert rollout_mse(truth, truth) == 0.0
    assert rollout_mse(pred, truth) == pytest.approx(brute_mse(pred, truth, 6), rel=1e-12)
    c = np.array([3e-7, -4e-7])
    assert rollout_mse(truth + c, truth) == pytest.approx(5e-7, rel=1e-9)
    with pytest.raises(ShapeError):
        rollout_mse(pred[:, :5], truth)


def test_segment_partition_sizes():
    for n in range(5, 120):
        rest = np.zeros((n, 2))
        rest[:, 0] = 0.3 + H * np.arange(n)
        counts = np.bincount(segment_ids(rest), minlength=5)
        assert counts.sum() == n and counts.max() - counts.min() <= 1, n


def brute_spatial(pred, truth, frames, rest, act):
    seg = segment_ids(rest)
    out = [[] for _ in range(5)]
    for i in range(pred.shape[1]):
        if i == act:
            continue
        sq = [sum((pred[t, i, k] - truth[t, i, k]) ** 2 for k in range(2)) for t in frames]
        out[seg[i]].append(np.sqrt(sum(sq) / len(sq)))
    return out


def test_spatial_rmse_matches_brute_force():
    rng = np.random.default_rng(1)
    truth = rng.normal(size=(40, 23, 2))
    pred = truth + rng.normal(scale=0.2, size=truth.shape)
    rest = np.zeros((23, 2))
    rest[:, 0] = H * np.arange(23)
    got = spatial_rmse(pred, truth, 1e-6, rest, actuator=7, window=(10e-6, 30e-6))
    ref = brute_spatial(pred, truth, range(10, 31), rest, 7)
    assert sum(len(g) for g in got) == 22
    for a, b in zip(got, ref):
        np.testing.assert_allclose(a, b, rtol=1e-12)
    zero = spatial_rmse(truth, truth, 1e-6, rest, actuator=7, window=(10e-6, 30e-6))
    assert all(np.all(z == 0) for z in zero)
    with pytest.raises(ConfigError):
        spatial_rmse(pred[:, :4], truth[:, :4], 1e-6, rest[:4])
    with pytest.raises(ConfigError):
        spatial_rmse(pred, truth, 1e-6, rest, window=(50e-6, 60e-6))


def test_temporal_rmse_matches_brute_force():
    rng = np.random.default_rng(2)
    truth = rng.normal(size=(30, 8, 2))
    pred = truth + rng.normal(scale=0.3, size=truth.shape)
    got = temporal_rmse(pred, truth, 1e-6, t_list=(12e-6, 29e-6), actuator=3)
    for ti, vals in zip((12, 29), got):
        ref = [np.sqrt(np.mean([np.sum((pred[t, i] - truth[t, i]) ** 2) for t in range(6, ti + 1)])) for i in range(8) if i != 3]
        np.testing.assert_allclose(vals, ref, rtol=1e-12)
    first = temporal_rmse(pred, truth, 1e-6, t_list=(1e-9,))[0]
    np.testing.assert_allclose(first, np.linalg.norm(pred[6] - truth[6], axis=-1), rtol=1e-12)
    assert all(np.all(v == 0) for v in temporal_rmse(truth, truth, 1e-6, t_list=(5e-6, 20e-6)))
    with pytest.raises(ConfigError):
        temporal_rmse(pred, truth, 1e-6, t_list=(40e-6,))


def test_temporal_rmse_monotone_for_growing_error():
    truth = np.zeros((60, 10, 2))
    growth = np.linspace(0, 1, 60)[:, None, None] * np.linspace(1, 2, 10)[None, :, None]
    vals = temporal_rmse(truth + growth, truth, 1e-6, t_list=(7e-6, 20e-6, 40e-6, 59e-6))
    for a, b in zip(vals, vals[1:]):
        assert np.all(b >= a)


def test_evaluate_and_report(tmp_path, long_traj):
    res = rollout(SecondDifferenceOracle(long_traj), long_traj)
    report = evaluate(res.as_trajectory(long_traj), long_traj)
    assert report.rollout_mse < 1e-18
    assert not report.diverged
    assert len(report.segment_rmse) == 5
    assert sum(len(s) for s in report.segment_rmse) == long_traj.n_nodes - 1
    # the 55 us run clips the later sampling times to its span
    assert report.t_list[:2] == (1e-6, 50e-6)
    assert report.t_list[2] == pytest.approx((long_traj.n_steps - 1) * long_traj.dt_ph)
    assert sorted(report.node_histories) == [5, long_traj.n_nodes // 2, long_traj.n_nodes - 6]
    path = tmp_path / "report.tsv"
    report.write(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "metric\tgroup\tindex\tvalue"
    assert any(line.startswith("rollout_mse\t") for line in lines)
    assert sum(line.startswith("segment_hist\t0\t") for line in lines) == 20
    assert evaluate(res.as_trajectory(long_traj), long_traj, diverged=True).diverged


def test_evaluate_flags_large_prediction(long_traj):
    blown = long_traj.local_displacements.copy()
    blown[-1, 3, 1] = 1.0
    pred = Trajectory(long_traj.dt_ph, long_traj.node_rest_positions, long_traj.node_types, blown)
    assert evaluate(pred, long_traj).diverged
