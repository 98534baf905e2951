"""Explicit central-difference Timoshenko beam solver used as ground truth.

The beam lies along the global x axis, is clamped at both ends and is driven
by a prescribed transverse displacement at one interior node.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, NumericalDivergence, StabilityError
from .trajectory import ACTUATOR, CLAMPED, FREE, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaterialSection:
    """Isotropic material with a rectangular cross-section."""

    young_modulus: float = 72e9
    density: float = 2900.0
    poisson_ratio: float = 0.3
    width: float = 5e-3
    height: float = 1e-3
    shear_correction: float = 5.0 / 6.0

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ConfigError(f"young_modulus must be > 0, got {self.young_modulus}")
        if not self.density > 0:
            raise ConfigError(f"density must be > 0, got {self.density}")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ConfigError(f"poisson_ratio must be in [0, 0.5), got {self.poisson_ratio}")
        if not (self.width > 0 and self.height > 0):
            raise ConfigError("section width and height must be > 0")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def second_moment(self) -> float:
        return self.width * self.height**3 / 12.0

    @property
    def shear_modulus(self) -> float:
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def bar_speed(self) -> float:
        return math.sqrt(self.young_modulus / self.density)


@dataclass(frozen=True)
class ExcitationSpec:
    """Hanning-windowed sine burst applied as a prescribed displacement."""

    frequency: float = 50e3
    cycles: int = 1
    amplitude: float = 1e-6
    direction: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not self.frequency > 0:
            raise ConfigError(f"frequency must be > 0, got {self.frequency}")
        if not self.amplitude >= 0:
            raise ConfigError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.cycles < 1:
            raise ConfigError(f"cycles must be >= 1, got {self.cycles}")
        dx, dy = self.direction
        if abs(dx) > 1e-12 or abs(abs(dy) - 1.0) > 1e-12:
            raise ConfigError(f"direction must be the unit transverse vector (0, +-1), got {self.direction}")

    @property
    def duration(self) -> float:
        return self.cycles / self.frequency

    @property
    def sign(self) -> float:
        return math.copysign(1.0, self.direction[1])


@dataclass
class BeamModel:
    rest_positions: np.ndarray
    elements: np.ndarray
    section: MaterialSection
    clamped_nodes: tuple[int, ...]
    actuator_node: int
    element_length: float
    origin: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def n_nodes(self) -> int:
        return self.rest_positions.shape[0]

    @property
    def length(self) -> float:
        return self.element_length * (self.n_nodes - 1)

    def node_types(self) -> np.ndarray:
        types = np.full(self.n_nodes, FREE, dtype=np.int64)
        types[list(self.clamped_nodes)] = CLAMPED
        types[self.actuator_node] = ACTUATOR
        return types


def _element_count(length: float, element_size: float) -> int:
    ratio = length / element_size
    count = round(ratio)
    if abs(ratio - count) > 1e-6 * max(1.0, ratio):
        nearest = max(count, 1)
        raise ConfigError(
            f"length/element_size = {ratio:.6g} is not an integer; nearest valid element "
            f"count is {nearest} (element_size = {length / nearest:.6g} m)"
        )
    if count < 4:
        raise ConfigError(f"need at least 4 elements, got {count}")
    return count


def build_beam_model(
    length: float,
    element_size: float,
    section: MaterialSection,
    actuator_position: float,
    origin: tuple[float, float] = (0.0, 0.0),
) -> BeamModel:
    """Uniform clamped-clamped beam with the actuator snapped to the nearest node.

    ``actuator_position`` is measured along the beam from the left clamp;
    ``origin`` places the left clamp in the global frame.
    """
    if not (length > 0 and element_size > 0):
        raise ConfigError("length and element_size must be > 0")
    n_el = _element_count(length, element_size)
    h = length / n_el
    if not 0 < actuator_position < length:
        raise ConfigError(f"actuator position {actuator_position} m is not strictly inside (0, {length})")
    act = int(round(actuator_position / h))
    if act <= 0 or act >= n_el:
        raise ConfigError(f"actuator position {actuator_position} m snaps onto a clamped node")
    n = n_el + 1
    rest = np.zeros((n, 2))
    rest[:, 0] = origin[0] + h * np.arange(n)
    rest[:, 1] = origin[1]
    elements = np.stack([np.arange(n_el), np.arange(1, n)], axis=1)
    return BeamModel(rest, elements, section, (0, n - 1), act, h, tuple(origin))


def assemble_element(section: MaterialSection, L_e: float) -> tuple[np.ndarray, np.ndarray]:
    """Stiffness and row-sum lumped mass of a 2-node Timoshenko element.

    DOFs per node are (axial u, transverse w, rotation theta). Linear shape
    functions with one-point (reduced) integration of the shear term.
    """
    E, G = section.young_modulus, section.shear_modulus
    A, I, kappa = section.area, section.second_moment, section.shear_correction
    k = np.zeros((6, 6))
    ax = E * A / L_e
    k[np.ix_([0, 3], [0, 3])] += ax * np.array([[1.0, -1.0], [-1.0, 1.0]])
    bs = np.array([-1.0 / L_e, -0.5, 1.0 / L_e, -0.5])  # shear strain at midpoint
    shear = [1, 2, 4, 5]
    k[np.ix_(shear, shear)] += kappa * G * A * L_e * np.outer(bs, bs)
    bend = E * I / L_e
    k[np.ix_([2, 5], [2, 5])] += bend * np.array([[1.0, -1.0], [-1.0, 1.0]])
    m = section.density * A * L_e / 2.0
    j = section.density * I * L_e / 2.0
    return k, np.array([m, m, j, m, m, j])


def lumped_mass(model: BeamModel) -> np.ndarray:
    _, me = assemble_element(model.section, model.element_length)
    mass = np.zeros(3 * model.n_nodes)
    for a, b in model.elements:
        mass[3 * a : 3 * a + 3] += me[:3]
        mass[3 * b : 3 * b + 3] += me[3:]
    return mass


def stable_increment(model: BeamModel) -> float:
    """Conservative explicit time step ``2 / omega_max`` from element eigenvalues."""
    from scipy.linalg import eigh

    ke, me = assemble_element(model.section, model.element_length)
    omega2 = eigh(ke, np.diag(me), eigvals_only=True)
    dt = 2.0 / math.sqrt(float(omega2.max()))
    log.info("stable increment %.4g s (bar-wave estimate %.4g s)", dt, bar_wave_increment(model))
    return dt


def bar_wave_increment(model: BeamModel) -> float:
    """CFL estimate ``h_min / c`` with the bar speed ``c = sqrt(E / rho)``."""
    return model.element_length / model.section.bar_speed


def hanning_pulse(t, spec: ExcitationSpec):
    """Hanning-windowed sine burst; exactly zero outside ``[0, cycles / f]``."""
    t = np.asarray(t, dtype=np.float64)
    tp = spec.duration
    inside = (t >= 0) & (t <= tp)
    tc = np.where(inside, t, 0.0)
    val = spec.amplitude * 0.5 * (1.0 - np.cos(2 * np.pi * tc / tp)) * np.sin(2 * np.pi * spec.frequency * tc)
    out = np.where(inside, val, 0.0)
    out = np.where(np.isclose(t, tp, rtol=0, atol=1e-15 * tp) | (t == 0), 0.0, out)
    return out if out.ndim else float(out)


def _integer_ratio(a: float, b: float, what: str) -> int:
    r = a / b
    n = round(r)
    if n < 1 or abs(r - n) > 1e-6 * max(1.0, r):
        raise ConfigError(f"{what} must be a positive integer, got {r:.6g}")
    return n


def run_explicit(
    model: BeamModel,
    spec: ExcitationSpec,
    total_time: float,
    dt: float,
    dt_ph: float | None = None,
    enforce_stability: bool = True,
) -> Trajectory:
    """Integrate the beam and sample displacements every ``dt_ph``.

    Stores ``total_time / dt_ph`` frames at times ``0, dt_ph, ...``.
    """
    if enforce_stability:
        bound = stable_increment(model)
        if dt > bound:
            raise StabilityError(f"dt = {dt:.4g} s exceeds the stable increment {bound:.4g} s")
    dt_ph = dt if dt_ph is None else dt_ph
    stride = _integer_ratio(dt_ph, dt, "dt_ph/dt")
    n_frames = _integer_ratio(total_time, dt_ph, "total_time/dt_ph")
    return _integrate(model, spec, dt, stride, n_frames, dt_ph)


def _integrate(model, spec, dt, stride, n_frames, dt_ph) -> Trajectory:
    ke, _ = assemble_element(model.section, model.element_length)
    mass = lumped_mass(model)
    n = model.n_nodes
    fixed = np.zeros(3 * n, dtype=np.bool_)
    for c in model.clamped_nodes:
        fixed[3 * c : 3 * c + 3] = True
    n_steps = (n_frames - 1) * stride
    times = dt * np.arange(n_steps + 1)
    prescribed = spec.sign * np.asarray(hanning_pulse(times, spec), dtype=np.float64)
    out = np.zeros((n_frames, n, 2))
    status = _kernels.central_difference(
        ke, 1.0 / mass, fixed, 3 * model.actuator_node + 1, prescribed, dt, n_steps, stride, out
    )
    if status >= 0:
        raise NumericalDivergence(f"non-finite state at integration step {status}", step=int(status))
    return Trajectory(dt_ph, model.rest_positions.copy(), model.node_types(), out, model.actuator_node)


def integrate_steps(model: BeamModel, spec: ExcitationSpec, dt: float, n_steps: int) -> Trajectory:
    """Integrate ``n_steps`` increments of ``dt`` without a stability check.

    Every step is stored. Used to probe the stability bound.
    """
    return _integrate(model, spec, dt, 1, n_steps + 1, dt)


def dispersion_wavelength(section: MaterialSection, f: float) -> float:
    """Euler-Bernoulli bending wavelength at frequency ``f``."""
    if not f > 0:
        raise ConfigError(f"frequency must be > 0, got {f}")
    omega = 2 * math.pi * f
    ei = section.young_modulus * section.second_moment
    rho_a = section.density * section.area
    return 2 * math.pi * (ei / (rho_a * omega**2)) ** 0.25


def _axial_coordinate(traj: Trajectory) -> np.ndarray:
    rest = traj.node_rest_positions
    return rest[:, 0] - rest[0, 0]


def arrival_times(traj: Trajectory, threshold: float = 0.01) -> np.ndarray:
    """First time each node's transverse displacement exceeds ``threshold`` x peak input.

    NaN for nodes never reached.
    """
    w = np.abs(traj.local_displacements[:, :, 1])
    ref = w[:, traj.actuator_node].max()
    if ref == 0:
        return np.full(traj.n_nodes, np.nan)
    hit = w > threshold * ref
    first = np.argmax(hit, axis=0).astype(np.float64)
    first[~hit.any(axis=0)] = np.nan
    return first * traj.dt_ph


def front_speed(traj: Trajectory, threshold: float = 0.01, min_distance: float | None = None) -> float:
    """Speed of the leading wavefront from a least-squares fit of distance vs arrival."""
    s = _axial_coordinate(traj)
    dist = np.abs(s - s[traj.actuator_node])
    t_arr = arrival_times(traj, threshold)
    if min_distance is None:
        min_distance = 5 * (s[1] - s[0])
    ok = np.isfinite(t_arr) & (dist >= min_distance)
    if traj.node_types is not None:
        ok &= traj.node_types == FREE
    if ok.sum() < 3:
        raise ConfigError("too few nodes reached by the wavefront to measure its speed")
    A = np.stack([t_arr[ok], np.ones(ok.sum())], axis=1)
    slope, _ = np.linalg.lstsq(A, dist[ok], rcond=None)[0]
    return float(slope)


def measure_wavelength(traj: Trajectory, frequency: float, d_min: float, d_max: float) -> float:
    """Wavelength at ``frequency`` from the phase slope along the beam.

    Takes the Fourier phase of each node's transverse history at
    ``frequency`` for nodes ``d_min..d_max`` to the right of the actuator,
    unwraps it along the beam and fits ``phase = -k * distance``.
    """
    s = _axial_coordinate(traj)
    dist = s - s[traj.actuator_node]
    sel = (dist >= d_min) & (dist <= d_max)
    if sel.sum() < 3:
        raise ConfigError("need at least three nodes in the measurement span")
    w = traj.local_displacements[:, sel, 1]
    t = traj.dt_ph * np.arange(traj.n_steps)
    phasor = np.exp(-2j * np.pi * frequency * t) @ w
    phase = np.unwrap(np.angle(phasor))
    k = -np.polyfit(dist[sel], phase, 1)[0]
    return float(2 * np.pi / k)


def measure_wavelength_peaks(traj: Trajectory, frame: int, side: int = 1) -> float:
    """Mean crest-to-crest distance of the outgoing wave in one snapshot.

    Only crests above 20% of the snapshot maximum on the chosen side of the
    actuator are used.
    """
    s = _axial_coordinate(traj)
    a = traj.actuator_node
    w = traj.local_displacements[frame, :, 1]
    idx = np.arange(a + 2, traj.n_nodes - 1) if side > 0 else np.arange(a - 2, 0, -1)
    seg = w[idx]
    amp = np.abs(seg).max()
    crest = [
        k for k in range(1, len(seg) - 1)
        if seg[k] > seg[k - 1] and seg[k] >= seg[k + 1] and seg[k] > 0.2 * amp
    ]
    if len(crest) < 2:
        raise ConfigError("fewer than two crests in the snapshot")
    # parabolic refinement of crest positions
    pos = []
    for k in crest:
        y0, y1, y2 = seg[k - 1], seg[k], seg[k + 1]
        den = y0 - 2 * y1 + y2
        off = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        pos.append(s[idx[k]] + off * (s[idx[k + 1]] - s[idx[k]]))
    return float(np.mean(np.abs(np.diff(pos))))


def extract_dataset_window(traj: Trajectory, margin: float, threshold: float = 0.01) -> Trajectory:
    """Keep nodes at least ``margin`` from both clamps, truncated before reflections.

    The kept duration satisfies ``T * c < s_a + margin`` on each side, where
    ``s_a`` is the actuator's distance to that clamp and ``c`` the measured
    front speed: the first reflected front has not re-entered the window.
    """
    s = _axial_coordinate(traj)
    length = s[-1]
    h = s[1] - s[0]
    tol = 1e-9 * h
    keep = np.flatnonzero((s >= margin - tol) & (s <= length - margin + tol))
    if keep.size < 10:
        raise ConfigError(f"margin {margin} m leaves {keep.size} nodes; need at least 10")
    a = traj.actuator_node
    if a is None or a not in keep:
        raise ConfigError("actuator node falls outside the kept window")
    t_limit = traj.duration
    if np.abs(traj.local_displacements).max() > 0:
        c = front_speed(traj, threshold)
        sa = s[a]
        t_reflect = min(sa + margin, length - sa + margin) / c
        n_keep = int(math.floor(t_reflect / traj.dt_ph))
        if n_keep * traj.dt_ph * c >= min(sa + margin, length - sa + margin):
            n_keep -= 1
        t_limit = min(t_limit, n_keep * traj.dt_ph)
    n_steps = min(traj.n_steps, int(round(t_limit / traj.dt_ph)))
    return Trajectory(
        traj.dt_ph,
        traj.node_rest_positions[keep],
        traj.node_types[keep],
        traj.local_displacements[:n_steps, keep],
        int(np.searchsorted(keep, a)),
    )
