"""Hyperparameter sweeps and runtime-scaling measurements."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .beam import ExcitationSpec, MaterialSection, build_beam_model, run_explicit, stable_increment
from .config import SCHEMA, RunConfig
from .errors import ConfigError
from .graph import build_topology
from .model import GnssConfig, GnssModel, StateWindow, predict_accelerations, update_state
from .rollout import rollout, rollout_mse
from .training import train
from .trajectory import ACTUATOR, Trajectory

log = logging.getLogger(__name__)

SWEEP_AXES = ("radius_multiple", "penalty_s", "message_steps", "noise_fraction")


@dataclass
class SweepRow:
    value: float
    mean: float
    std: float
    diverged: int
    n_parameters: int
    per_trajectory: list[float]


@dataclass
class SweepTable:
    axis: str
    rows: list[SweepRow] = field(default_factory=list)

    def best(self) -> SweepRow:
        finite = [r for r in self.rows if np.isfinite(r.mean)]
        if not finite:
            raise ConfigError("no sweep cell produced a finite rollout MSE")
        return min(finite, key=lambda r: r.mean)

    def write(self, path) -> None:
        lines = [f"{self.axis}\tmean_rollout_mse\tstd_rollout_mse\tdiverged\tn_parameters\tper_trajectory"]
        for r in self.rows:
            per = ",".join(f"{v:.6g}" for v in r.per_trajectory)
            lines.append(f"{r.value:g}\t{r.mean:.10g}\t{r.std:.10g}\t{r.diverged}\t{r.n_parameters}\t{per}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def score_model(model, trajectories: list[Trajectory], n_steps: int | None = None):
    """Rollout MSE per trajectory and the number of diverged rollouts."""
    scores, diverged = [], 0
    for traj in trajectories:
        res = rollout(model, traj, n_steps)
        scores.append(rollout_mse(res.positions, traj.local_displacements, res.seed_length))
        diverged += res.diverged
    return scores, diverged


def sweep(
    base: RunConfig,
    axis: str,
    values,
    train_set: list[Trajectory],
    val_set: list[Trajectory],
    eval_set: list[Trajectory],
) -> SweepTable:
    """Train once per value of ``axis`` (all else at ``base``) and score every cell.

    Each cell is scored by the mean and standard deviation of the rollout MSE
    over ``eval_set``; diverged rollouts stay in the statistics and are counted.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    table = SweepTable(axis)
    for v in values:
        cfg = RunConfig(base)
        cfg[axis] = SCHEMA[axis].parse(str(v))
        tic = time.perf_counter()
        model, _ = train(cfg.train_config(), cfg.model_config(), train_set, val_set)
        scores, diverged = score_model(model, eval_set, cfg.rollout_steps or None)
        row = SweepRow(float(v), float(np.mean(scores)), float(np.std(scores)), diverged,
                       model.n_parameters(), scores)
        table.rows.append(row)
        log.info("%s=%g: rollout MSE %.4g +- %.3g (%d diverged, %.0f s)",
                 axis, row.value, row.mean, row.std, diverged, time.perf_counter() - tic)
    return table


# ---- runtime scaling -----------------------------------------------------
@dataclass
class BenchReport:
    sizes: list[int]
    edges: list[int]
    gnss_step_seconds: list[float]
    fem_total_seconds: list[float]
    fem_increments: list[float]
    physical_time: float
    dt_ph: float

    @property
    def gnss_slope(self) -> float:
        return loglog_slope(self.sizes, self.gnss_step_seconds)

    @property
    def fem_slope(self) -> float:
        return loglog_slope(self.sizes, self.fem_total_seconds)

    @property
    def edge_fit(self) -> tuple[float, float]:
        """``(intercept, per-node slope)`` of the exact affine law ``|E| = a + b N``."""
        b, a = np.polyfit(np.asarray(self.sizes, float), np.asarray(self.edges, float), 1)
        return float(a), float(b)

    def speed_ratios(self) -> list[float]:
        """FEM total time over GNSS total time for the same physical duration."""
        frames = round(self.physical_time / self.dt_ph)
        return [f / (g * frames) for f, g in zip(self.fem_total_seconds, self.gnss_step_seconds)]

    def write(self, path) -> None:
        lines = ["n_nodes\tedges\tgnss_step_s\tfem_total_s\tfem_dt_s\tfem_over_gnss"]
        for row in zip(self.sizes, self.edges, self.gnss_step_seconds, self.fem_total_seconds,
                       self.fem_increments, self.speed_ratios()):
            lines.append("\t".join(f"{x:.6g}" if isinstance(x, float) else str(x) for x in row))
        lines.append(f"# gnss_slope\t{self.gnss_slope:.4f}")
        lines.append(f"# fem_slope\t{self.fem_slope:.4f}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def _median_time(fn, repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        tic = time.perf_counter()
        fn()
        times.append(time.perf_counter() - tic)
    return statistics.median(times)


def gnss_step_time(model: GnssModel, n_nodes: int, spacing: float, repetitions: int = 5) -> tuple[float, int]:
    """Median wall time of one rollout step on an ``n_nodes`` chain, and its edge count."""
    c = model.config
    rest = np.zeros((n_nodes, 2))
    rest[:, 0] = spacing * np.arange(n_nodes)
    types = np.zeros(n_nodes, dtype=np.int64)
    types[n_nodes // 2] = ACTUATOR
    edges = build_topology(rest, c.radius)
    rng = np.random.default_rng(0)
    frames = np.cumsum(rng.normal(0.0, 1e-9, size=(c.history + 2, n_nodes, 2)), axis=0)
    window = StateWindow(frames, types, rest, c.radius, c.mode, edges)
    imposed = {n_nodes // 2: np.zeros(2)}

    def step():
        acc = predict_accelerations(window, model)
        update_state(frames[-2], frames[-1], acc, types, imposed)

    step()
    return _median_time(step, repetitions), len(edges)


def fem_total_time(
    n_elements: int,
    length: float,
    section: MaterialSection,
    excitation: ExcitationSpec,
    physical_time: float,
    repetitions: int = 5,
) -> tuple[float, float]:
    """Median wall time of a full explicit run on a refined mesh at its stable increment."""
    h = length / n_elements
    model = build_beam_model(length, h, section, length / 2)
    bound = stable_increment(model)
    # increments rounded up to a multiple of the stored frame count
    frames = 100
    n_steps = frames * int(np.ceil(physical_time / bound / frames))
    dt = physical_time / n_steps

    def run():
        run_explicit(model, excitation, physical_time, dt, dt_ph=physical_time / frames)

    run()
    return _median_time(run, repetitions), dt


def runtime_bench(
    sizes,
    model_config: GnssConfig | None = None,
    radius_multiple: float = 7.0,
    length: float = 0.32,
    section: MaterialSection | None = None,
    excitation: ExcitationSpec | None = None,
    physical_time: float = 100e-6,
    dt_ph: float = 1e-7,
    repetitions: int = 5,
) -> BenchReport:
    """Per-step GNSS cost and total FEM cost against node count.

    Every size refines the same beam (``length``), so the FEM stable
    increment shrinks with the element size while the GNSS step count for
    ``physical_time`` stays fixed. The GNSS radius is ``radius_multiple``
    element sizes, keeping the node degree constant; only the shape of
    ``model_config`` matters (weights are untrained).
    """
    sizes = sorted(int(n) for n in sizes)
    if len(set(sizes)) < 3 or sizes[-1] < 4 * sizes[0]:
        raise ConfigError("need at least 3 distinct sizes spanning a factor of 4")
    if repetitions < 5:
        raise ConfigError("each timing point needs at least 5 repetitions")
    section = section or MaterialSection()
    excitation = excitation or ExcitationSpec()
    report = BenchReport(sizes, [], [], [], [], physical_time, dt_ph)
    with threadpool_limits(1):
        for n in sizes:
            n_el = n - 1
            h = length / n_el
            mc = replace(model_config or GnssConfig(radius=h), radius=radius_multiple * h)
            model = GnssModel(mc, seed=0)
            step, n_edges = gnss_step_time(model, n, h, repetitions)
            total, dt = fem_total_time(n_el, length, section, excitation, physical_time, repetitions)
            report.edges.append(n_edges)
            report.gnss_step_seconds.append(step)
            report.fem_total_seconds.append(total)
            report.fem_increments.append(dt)
            log.info("N=%d: %d edges, GNSS step %.4g s, FEM total %.4g s (dt %.3g s)", n, n_edges, step, total, dt)
    return report
