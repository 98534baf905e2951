"""Training loop: batch sampling, velocity noise, sign-aware loss and Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError
from .graph import build_topology, window_features
from .model import GnssConfig, GnssModel, GraphBatch, save_checkpoint
from .rollout import representation, rollout, rollout_mse
from .trajectory import FREE, Trajectory

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 2
    steps: int = 2000
    noise_fraction: float = 0.095
    noise_reference: str = "increment"
    penalty_s: float = 1.5
    lr: float = 1e-4
    lr_final: float = 1e-6
    seed: int = 0
    val_every: int = 0
    val_samples: int = 32
    val_rollout_steps: int | None = None
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.penalty_s < 1:
            raise ConfigError("penalty_s must be >= 1")
        if self.noise_fraction < 0:
            raise ConfigError("noise_fraction must be >= 0")
        if self.noise_reference not in ("increment", "displacement"):
            raise ConfigError("noise_reference must be 'increment' or 'displacement'")


@dataclass
class Dataset:
    """A trajectory prepared in the model's position representation."""

    traj: Trajectory
    positions: np.ndarray
    edges: np.ndarray
    radius: float
    mode: str

    @classmethod
    def prepare(cls, traj: Trajectory, config: GnssConfig) -> "Dataset":
        return cls(
            traj,
            representation(traj, config.mode, config.position_dtype),
            build_topology(traj.node_rest_positions, config.radius),
            config.radius,
            config.mode,
        )

    @property
    def n_steps(self) -> int:
        return self.positions.shape[0]


@dataclass
class Sample:
    traj_id: int
    t: int
    window: np.ndarray  # (n + 2, N, d) frames t-n-1 .. t
    next_position: np.ndarray  # (N, d) frame t + 1
    target: np.ndarray  # (N, d) acceleration mapping the window onto next_position


@dataclass
class TrainReport:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    val_steps: list[int] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    skipped: int = 0

    def write(self, path) -> None:
        """Tab-separated ``step, loss, val_loss, val_mse``; validation cells are empty between checks.

        Validation at step ``k`` is taken after ``k`` updates, so it is listed
        with training row ``k - 1``. Wall-clock times go to :meth:`write_timing`
        to keep this file reproducible.
        """
        val = {s - 1: (vl, vm) for s, vl, vm in zip(self.val_steps, self.val_loss, self.val_mse)}
        lines = ["step\tloss\tval_loss\tval_mse"]
        for s, loss in zip(self.steps, self.loss):
            vl, vm = (f"{x:.10g}" for x in val[s]) if s in val else ("", "")
            lines.append(f"{s}\t{loss:.10g}\t{vl}\t{vm}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_timing(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step\tseconds\n" + "".join(f"{s}\t{t:.6g}\n" for s, t in zip(self.steps, self.seconds)))


def second_difference(prev, current, nxt) -> np.ndarray:
    """Acceleration that the unit-step Euler updater maps onto ``nxt``."""
    return (nxt - current) - (current - prev)


def valid_pairs(datasets, n: int) -> list[tuple[int, int]]:
    """All (trajectory, t) with a full history behind t and a label at t + 1."""
    pairs = []
    for k, ds in enumerate(datasets):
        pairs += [(k, t) for t in range(n + 1, ds.n_steps - 1)]
    return pairs


def make_sample(ds, k: int, t: int, n: int) -> Sample:
    pos = ds.positions if isinstance(ds, Dataset) else ds.local_displacements
    window = pos[t - n - 1 : t + 1]
    return Sample(k, t, window, pos[t + 1], second_difference(window[-2], window[-1], pos[t + 1]))


def sample_batch(datasets, B: int, rng: np.random.Generator, n: int = 4) -> list[Sample]:
    """``B`` independent samples drawn uniformly (with replacement) over all valid pairs."""
    if not datasets:
        raise ConfigError("empty dataset")
    short = [k for k, ds in enumerate(datasets) if ds.n_steps < n + 3]
    if short:
        raise ConfigError(f"trajectories {short} have fewer than {n + 3} steps")
    pairs = valid_pairs(datasets, n)
    idx = rng.integers(len(pairs), size=B)
    return [make_sample(datasets[pairs[i][0]], *pairs[i], n) for i in idx]


def inject_noise(sample: Sample, noise_std: float, rng: np.random.Generator) -> Sample:
    """Perturb every velocity of the window with i.i.d. Gaussian noise.

    The latest position is kept; earlier positions are rebuilt backwards from
    the perturbed velocities, and the target is recomputed so the noisy
    window still maps onto the true next position.
    """
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    if noise_std == 0:
        return sample
    w = sample.window
    vel = np.diff(w, axis=0) + rng.normal(0.0, noise_std, size=(w.shape[0] - 1, *w.shape[1:]))
    noisy = np.empty_like(w)
    noisy[-1] = w[-1]
    for k in range(w.shape[0] - 2, -1, -1):
        noisy[k] = noisy[k + 1] - vel[k]
    target = second_difference(noisy[-2], noisy[-1], sample.next_position)
    return Sample(sample.traj_id, sample.t, noisy, sample.next_position, target)


def wmse_terms(y: np.ndarray, y_hat: np.ndarray, s: float) -> np.ndarray:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeError(f"prediction {y.shape} and target {y_hat.shape} differ")
    return np.where(y * y_hat >= 0, 1.0, s)


def wmse_loss(y, y_hat, s: float = 1.5) -> float:
    """Mean squared error with residuals scaled by ``s`` on sign disagreement."""
    if s < 1:
        raise ConfigError("penalty s must be >= 1")
    w = wmse_terms(y, y_hat, s)
    eps = w * (np.asarray(y) - np.asarray(y_hat))
    return float(np.mean(eps * eps))


def wmse_loss_and_grad(y, y_hat, s: float, row_mask=None):
    """wMSE over the rows selected by ``row_mask`` and its gradient w.r.t. ``y``."""
    w = wmse_terms(y, y_hat, s)
    if row_mask is not None:
        w = w * np.asarray(row_mask, dtype=np.float64)[:, None]
    count = np.count_nonzero(w) or 1
    r = y - y_hat
    loss = float(np.sum((w * r) ** 2) / count)
    return loss, 2.0 * w * w * r / count


def fit_statistics(model: GnssModel, datasets, noise_std: float = 0.0) -> None:
    """Per-component mean/std of the training accelerations and velocities.

    The injected velocity noise is added in quadrature, so the statistics
    describe the noisy inputs and targets the network actually sees. A
    component that never varies borrows the largest scale of the others.
    """
    acc, vel = [], []
    for ds in datasets:
        p = ds.positions
        free = ds.traj.node_types == FREE
        v = np.diff(p, axis=0)[:, free]
        vel.append(v.reshape(-1, p.shape[2]))
        acc.append(np.diff(p, n=2, axis=0)[:, free].reshape(-1, p.shape[2]))
    acc = np.concatenate(acc)
    vel = np.concatenate(vel)

    def std(x):
        s = np.sqrt(x.var(axis=0) + noise_std**2)
        return np.where(s > 0, s, s.max() if s.max() > 0 else 1.0)

    model.accel_mean, model.accel_std = acc.mean(axis=0), std(acc)
    model.vel_mean, model.vel_std = vel.mean(axis=0), std(vel)


def noise_scale(datasets, config: TrainConfig) -> float:
    ref = 0.0
    for ds in datasets:
        p = ds.positions
        if config.noise_reference == "increment":
            ref = max(ref, float(np.abs(np.diff(p, axis=0)).max()))
        else:
            ref = max(ref, float(np.abs(ds.traj.local_displacements).max()))
    return config.noise_fraction * ref


def batch_of(samples: list[Sample], datasets, model: GnssModel) -> GraphBatch:
    graphs = []
    for smp in samples:
        ds = datasets[smp.traj_id]
        graphs.append(
            window_features(smp.window, ds.traj.node_rest_positions, ds.edges, ds.radius, ds.traj.node_types, ds.mode)
        )
    return GraphBatch.from_graphs(graphs)


def loss_and_grads(model: GnssModel, samples, datasets, s: float):
    batch = batch_of(samples, datasets, model)
    y, tape = model.forward(batch)
    target = model.standardize(np.concatenate([smp.target for smp in samples]))
    mask = batch.node_types == FREE
    loss, gy = wmse_loss_and_grad(y, target, s, mask)
    return loss, model.backward(tape, gy)


def train_step(model: GnssModel, samples, datasets, config: TrainConfig, opt: nn.AdamState):
    """One optimizer step on ``samples``; returns the pre-update loss."""
    loss, grads = loss_and_grads(model, samples, datasets, config.penalty_s)
    if not np.isfinite(loss):
        log.warning("non-finite loss at optimizer step %d; skipped", opt.step)
        return loss, False
    return loss, nn.adam_step(model.parameters(), grads, opt)


def validation_loss(model: GnssModel, datasets, s: float, max_samples: int) -> float:
    """Noise-free one-step wMSE over an evenly spaced subset of pairs."""
    n = model.config.history
    pairs = valid_pairs(datasets, n)
    if not pairs:
        return float("nan")
    pick = np.unique(np.linspace(0, len(pairs) - 1, min(max_samples, len(pairs))).astype(int))
    losses = []
    for i in pick:
        k, t = pairs[i]
        smp = make_sample(datasets[k], k, t, n)
        batch = batch_of([smp], datasets, model)
        y, _ = model.forward(batch)
        loss, _ = wmse_loss_and_grad(y, model.standardize(smp.target), s, batch.node_types == FREE)
        losses.append(loss)
    return float(np.mean(losses))


def validation_rollout(model: GnssModel, trajectories, steps: int | None) -> float:
    scores = []
    for traj in trajectories:
        res = rollout(model, traj, steps)
        scores.append(rollout_mse(res.positions, traj.local_displacements, res.seed_length))
        if res.diverged:
            scores[-1] = max(scores[-1], float(np.abs(res.positions).max()))
    return float(np.mean(scores))


def train(
    config: TrainConfig,
    model_config: GnssConfig,
    train_set: list[Trajectory],
    val_set: list[Trajectory] = (),
    model: GnssModel | None = None,
):
    """Run the training procedure; returns ``(model, report)``.

    With validation data the returned model is the one with the lowest
    validation rollout MSE seen at the configured cadence.
    """
    if not train_set:
        raise ConfigError("no training trajectories")
    if any(v is t for v in val_set for t in train_set):
        raise ConfigError("training and validation trajectories must be disjoint")
    datasets = [Dataset.prepare(t, model_config) for t in train_set]
    val_ds = [Dataset.prepare(t, model_config) for t in val_set]
    noise_std = noise_scale(datasets, config)
    if model is None:
        model = GnssModel(model_config, seed=config.seed)
        fit_statistics(model, datasets, noise_std)
    log.info("noise std %.4g, %d parameters", noise_std, model.n_parameters())
    opt = nn.AdamState(lr=config.lr)
    report = TrainReport()
    best, best_score = None, np.inf
    n = model_config.history

    def validate(step):
        nonlocal best, best_score
        if not val_set:
            return
        vl = validation_loss(model, val_ds, config.penalty_s, config.val_samples)
        vm = validation_rollout(model, val_set, config.val_rollout_steps)
        report.val_steps.append(step)
        report.val_loss.append(vl)
        report.val_mse.append(vm)
        log.info("step %d: val_loss %.4g val_mse %.4g", step, vl, vm)
        if np.isfinite(vm) and vm < best_score:
            best, best_score = model.copy(), vm

    for step in range(config.steps):
        tic = time.perf_counter()
        opt.lr = nn.exponential_lr(step, config.steps, config.lr, config.lr_final)
        rng = np.random.default_rng([config.seed, step])
        samples = sample_batch(datasets, config.batch_size, rng, n)
        samples = [
            inject_noise(smp, noise_std, np.random.default_rng([config.seed, step, i]))
            for i, smp in enumerate(samples)
        ]
        loss, applied = train_step(model, samples, datasets, config, opt)
        report.skipped += not applied
        report.steps.append(step)
        report.loss.append(loss)
        report.seconds.append(time.perf_counter() - tic)
        done = step + 1
        if config.val_every and done % config.val_every == 0 and done < config.steps:
            validate(done)
        if config.checkpoint_every and config.checkpoint_path and done % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, model)
    if config.steps > 0:
        validate(config.steps)
    if best is not None:
        model = best
    return model, report
