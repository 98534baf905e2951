"""Autoregressive rollout and the evaluation metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .beam import ExcitationSpec, hanning_pulse
from .errors import ConfigError, ShapeError
from .graph import build_topology
from .model import StateWindow, predict_accelerations, update_state
from .trajectory import ACTUATOR, Trajectory

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3


@dataclass
class RolloutResult:
    positions: np.ndarray  # (N_T, N, 2) local displacements
    seed_length: int
    step_times: list[float] = field(default_factory=list)
    diverged: bool = False
    divergence_step: int | None = None

    def as_trajectory(self, truth: Trajectory) -> Trajectory:
        return Trajectory(
            truth.dt_ph, truth.node_rest_positions, truth.node_types, self.positions, truth.actuator_node
        )


def representation(traj: Trajectory, mode: str, position_dtype: str = "float32") -> np.ndarray:
    """Positions in the model's frame: local displacements or stored absolute positions."""
    if mode == "local":
        return traj.local_displacements
    return traj.absolute_positions(np.dtype(position_dtype)).astype(np.float64)


def _prescribed_series(truth: Trajectory, n_steps: int, excitation: ExcitationSpec | None) -> np.ndarray:
    act = truth.actuator_node
    if excitation is None:
        if n_steps > truth.n_steps:
            raise ConfigError("no excitation given and truth is shorter than the requested rollout")
        return truth.local_displacements[:n_steps, act].copy()
    series = np.zeros((n_steps, 2))
    series[:, 1] = excitation.sign * hanning_pulse(truth.dt_ph * np.arange(n_steps), excitation)
    return series


def rollout(
    model,
    truth: Trajectory,
    n_steps: int | None = None,
    excitation: ExcitationSpec | None = None,
    amplitude: float | None = None,
) -> RolloutResult:
    """Roll ``model`` forward from the first ``n + 2`` ground-truth frames.

    ``model`` needs a ``config`` (history, radius, mode, num_types) and is
    called through ``model.predict(window)`` if it has one, otherwise
    through :func:`predict_accelerations`. The actuator follows
    ``excitation`` (or, if omitted, the truth's actuator history).
    A frame with a non-finite value or ``|u| > 1e3 * amplitude`` ends the
    rollout and sets ``diverged``; non-finite frames are not kept.
    """
    c = model.config
    n = c.history
    seed = n + 2
    n_steps = truth.n_steps if n_steps is None else n_steps
    if truth.n_steps < seed:
        raise ConfigError(f"truth has {truth.n_steps} frames; the seed window needs {seed}")
    if n_steps > truth.n_steps and excitation is None:
        raise ConfigError(f"requested {n_steps} steps but truth has only {truth.n_steps}")
    if truth.node_types.max() >= c.num_types:
        raise ConfigError("trajectory uses node types the model has no embedding for")
    n_steps = max(n_steps, seed)
    rest = truth.node_rest_positions
    mode = c.mode
    dtype = np.dtype(getattr(c, "position_dtype", "float32"))
    prescribed = _prescribed_series(truth, n_steps, excitation)
    if amplitude is None:
        amplitude = excitation.amplitude if excitation is not None else float(np.abs(prescribed).max())
    limit = DIVERGENCE_FACTOR * amplitude if amplitude > 0 else np.inf
    predict = getattr(model, "predict", None) or (lambda w: predict_accelerations(w, model))

    edges = build_topology(rest, c.radius)
    frames = np.empty((n_steps, truth.n_nodes, 2))
    frames[:seed] = representation(truth, mode, dtype.name)[:seed]
    act = np.flatnonzero(truth.node_types == ACTUATOR)
    pinned = rest if mode == "absolute" else None
    result = RolloutResult(np.empty(0), seed)
    last = n_steps
    for t in range(seed - 1, n_steps - 1):
        tic = time.perf_counter()
        window = StateWindow(frames[t - n - 1 : t + 1], truth.node_types, rest, c.radius, mode, edges)
        accel = predict(window)
        target = np.broadcast_to(prescribed[t + 1], (len(act), 2)) + (rest[act] if mode == "absolute" else 0.0)
        imposed = {int(i): target[k] for k, i in enumerate(act)}
        nxt, _ = update_state(frames[t - 1], frames[t], accel, truth.node_types, imposed, pinned)
        if mode == "absolute":
            nxt = nxt.astype(dtype).astype(np.float64)
        result.step_times.append(time.perf_counter() - tic)
        disp = nxt - rest if mode == "absolute" else nxt
        if not np.isfinite(disp).all():
            result.diverged, result.divergence_step, last = True, t + 1, t + 1
            break
        frames[t + 1] = nxt
        if np.abs(disp).max() > limit:
            result.diverged, result.divergence_step, last = True, t + 1, t + 2
            break
    frames = frames[:last]
    result.positions = frames - rest[None] if mode == "absolute" else frames
    if mode == "absolute":
        result.positions[:seed] = truth.local_displacements[:seed]
    if result.diverged:
        log.warning("rollout diverged at step %d", result.divergence_step)
    return result


# ---- metrics ---------------------------------------------------------------
def _aligned(pred: np.ndarray, truth: np.ndarray):
    if pred.ndim != 3 or truth.ndim != 3 or pred.shape[1:] != truth.shape[1:]:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} are not aligned")
    t = min(pred.shape[0], truth.shape[0])
    return pred[:t], truth[:t]


def rollout_mse(pred: np.ndarray, truth: np.ndarray, seed: int = 6) -> float:
    """Mean Euclidean distance between predicted and true positions, seed frames excluded."""
    pred, truth = _aligned(pred, truth)
    err = np.linalg.norm(pred[seed:] - truth[seed:], axis=-1)
    return float(err.mean()) if err.size else 0.0


def segment_ids(rest_positions: np.ndarray, segments: int = 5) -> np.ndarray:
    """Equal-length segment index of every node along the beam axis."""
    s = rest_positions[:, 0] - rest_positions[:, 0].min()
    span = s.max()
    if span == 0:
        return np.zeros(len(s), dtype=np.int64)
    ids = np.floor(s / span * segments * (1 + 1e-12)).astype(np.int64)
    return np.clip(ids, 0, segments - 1)


def _frames_in(t0: float, t1: float, dt_ph: float, n_frames: int) -> np.ndarray:
    k0 = int(np.ceil(t0 / dt_ph - 1e-9))
    k1 = int(np.floor(t1 / dt_ph + 1e-9))
    if k0 >= n_frames or k0 > k1:
        raise ConfigError(f"time window [{t0}, {t1}] s lies outside the rollout span")
    return np.arange(k0, min(k1, n_frames - 1) + 1)


def spatial_rmse(
    pred, truth, dt_ph, rest_positions, actuator=None, segments=5, window=(30e-6, 100e-6)
) -> list[np.ndarray]:
    """Per-node displacement RMSE over ``window``, grouped into equal-length segments.

    Returns one array of per-node values per segment; the actuator is left out.
    """
    pred, truth = _aligned(pred, truth)
    n_nodes = pred.shape[1]
    if n_nodes < segments:
        raise ConfigError(f"need at least {segments} nodes, got {n_nodes}")
    frames = _frames_in(window[0], window[1], dt_ph, pred.shape[0])
    err2 = np.sum((pred[frames] - truth[frames]) ** 2, axis=-1)
    per_node = np.sqrt(err2.mean(axis=0))
    seg = segment_ids(rest_positions, segments)
    keep = np.ones(n_nodes, dtype=bool)
    if actuator is not None:
        keep[actuator] = False
    return [per_node[(seg == k) & keep] for k in range(segments)]


def temporal_rmse(pred, truth, dt_ph, t_list=(1e-6, 50e-6, 99e-6), seed=6, actuator=None) -> list[np.ndarray]:
    """Per-node RMSE aggregated from the first predicted frame up to each ``t_i``."""
    pred, truth = _aligned(pred, truth)
    err2 = np.sum((pred - truth) ** 2, axis=-1)
    keep = np.ones(pred.shape[1], dtype=bool)
    if actuator is not None:
        keep[actuator] = False
    out = []
    for ti in t_list:
        k = int(np.floor(ti / dt_ph + 1e-9))
        if k >= pred.shape[0]:
            raise ConfigError(f"t_i = {ti} s lies beyond the rollout span")
        k = max(k, seed)
        out.append(np.sqrt(err2[seed : k + 1].mean(axis=0))[keep])
    return out


@dataclass
class RolloutReport:
    rollout_mse: float
    segment_rmse: list[np.ndarray]
    temporal_rmse: list[np.ndarray]
    t_list: tuple[float, ...]
    diverged: bool
    max_displacement: float
    node_histories: dict[int, np.ndarray]
    runtime: dict[str, float] = field(default_factory=dict)

    def histogram(self, values: np.ndarray, bins: int = 20, top: float | None = None):
        top = top if top is not None else max(float(np.max(values)) if len(values) else 0.0, 1e-30)
        return np.histogram(values, bins=bins, range=(0.0, top))

    def write(self, path, bins: int = 20) -> None:
        """Tab-separated ``metric, group, index, value`` rows with a header."""
        rows = ["metric\tgroup\tindex\tvalue"]
        rows.append(f"rollout_mse\t\t\t{self.rollout_mse:.17g}")
        rows.append(f"diverged\t\t\t{int(self.diverged)}")
        rows.append(f"max_displacement\t\t\t{self.max_displacement:.17g}")
        for k, v in self.runtime.items():
            rows.append(f"runtime\t{k}\t\t{v:.6g}")
        everything = np.concatenate(self.segment_rmse + self.temporal_rmse) if self.segment_rmse else []
        top = float(np.max(everything)) if len(everything) else 1.0
        for s, vals in enumerate(self.segment_rmse):
            for i, v in enumerate(vals):
                rows.append(f"segment_rmse\t{s}\t{i}\t{v:.17g}")
            counts, edges = self.histogram(vals, bins, top)
            for b, cnt in enumerate(counts):
                rows.append(f"segment_hist\t{s}\t{edges[b]:.6g}\t{cnt}")
        for ti, vals in zip(self.t_list, self.temporal_rmse):
            for i, v in enumerate(vals):
                rows.append(f"temporal_rmse\t{ti:.6g}\t{i}\t{v:.17g}")
            counts, edges = self.histogram(vals, bins, top)
            for b, cnt in enumerate(counts):
                rows.append(f"temporal_hist\t{ti:.6g}\t{edges[b]:.6g}\t{cnt}")
        for node, hist in self.node_histories.items():
            for t, (p, q) in enumerate(hist):
                rows.append(f"node_history\t{node}\t{t}\t{p:.17g},{q:.17g}")
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def evaluate(
    pred: Trajectory,
    truth: Trajectory,
    seed: int = 6,
    window=(30e-6, 100e-6),
    t_list=(1e-6, 50e-6, 99e-6),
    amplitude: float | None = None,
    diverged: bool | None = None,
) -> RolloutReport:
    """Full metric suite. Window and ``t_i`` values are clipped to the available span.

    ``diverged`` overrides the magnitude-based divergence test (a rollout that
    stopped on a non-finite frame knows it diverged; a file does not).
    """
    p, q = _aligned(pred.local_displacements, truth.local_displacements)
    span = (p.shape[0] - 1) * truth.dt_ph
    win = (min(window[0], span), min(window[1], span))
    ts = tuple(min(t, span) for t in t_list)
    act = truth.actuator_node
    if amplitude is None:
        amplitude = float(np.abs(truth.local_displacements[:, act]).max()) if act is not None else 0.0
    max_disp = float(np.abs(pred.local_displacements).max()) if pred.n_steps else 0.0
    if diverged is None:
        diverged = (not np.isfinite(max_disp)) or (amplitude > 0 and max_disp > DIVERGENCE_FACTOR * amplitude)
    n = truth.n_nodes
    picks = sorted({min(5, n - 1), n // 2, max(n - 6, 0)})
    return RolloutReport(
        rollout_mse=rollout_mse(p, q, seed),
        segment_rmse=spatial_rmse(p, q, truth.dt_ph, truth.node_rest_positions, act, window=win),
        temporal_rmse=temporal_rmse(p, q, truth.dt_ph, ts, seed, act),
        t_list=ts,
        diverged=bool(diverged),
        max_displacement=max_disp,
        node_histories={i: np.stack([p[:, i, 1], q[:, i, 1]], axis=1) for i in picks},
    )
