"""Graph construction: radius topology, velocity histories and edge features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ShapeError
from .trajectory import Trajectory

# Relative slack on the radius test so that lattice neighbours at exactly R survive rounding.
RADIUS_SLACK = 1e-9

_UNIT_BALL = {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}


@dataclass
class FeatureGraph:
    """Raw (unnormalised) model input for one timestep.

    ``edges[k] = (sender, receiver)``; ``velocity[i, c, k]`` is component ``c``
    of node ``i``'s velocity ``k`` steps back (``k = 0`` is the latest).
    """

    edges: np.ndarray
    velocity: np.ndarray
    node_types: np.ndarray
    edge_features: np.ndarray
    radius: float

    @property
    def n_nodes(self) -> int:
        return self.velocity.shape[0]

    def node_features(self) -> np.ndarray:
        """Flattened velocity history, all x components first, then y."""
        return self.velocity.reshape(self.n_nodes, -1)


def build_topology(rest_positions: np.ndarray, radius: float) -> np.ndarray:
    """Directed edges between every pair of distinct nodes within ``radius``.

    Both directions are returned, sorted by (sender, receiver).
    """
    if not radius > 0:
        raise ConfigError(f"connectivity radius must be > 0, got {radius}")
    pts = np.asarray(rest_positions, dtype=np.float64)
    pairs = cKDTree(pts).query_pairs(radius * (1 + RADIUS_SLACK), output_type="ndarray")
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    edges = np.concatenate([pairs, pairs[:, ::-1]]).astype(np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def expected_degree(intensity: float, radius: float, d: int) -> float:
    """Mean degree of a radius graph over points of the given spatial intensity."""
    if d not in _UNIT_BALL:
        raise ConfigError(f"dimension must be 1, 2 or 3, got {d}")
    return intensity * _UNIT_BALL[d] * radius**d


def velocity_history(positions, t: int, n: int) -> np.ndarray:
    """Unit-timestep finite-difference velocities ending at step ``t``.

    ``positions`` is a ``(T, N, d)`` array (or a Trajectory, whose local
    displacements are used). Returns ``(N, d, n + 1)`` with
    ``out[..., k] = x[t - k] - x[t - k - 1]``.
    """
    if isinstance(positions, Trajectory):
        positions = positions.local_displacements
    if t < n + 1:
        raise ConfigError(f"velocity history of depth {n} needs t >= {n + 1}, got t={t}")
    if t >= positions.shape[0]:
        raise ConfigError(f"t={t} beyond trajectory length {positions.shape[0]}")
    window = positions[t - n - 1 : t + 1]
    return window_velocity(window)


def window_velocity(window: np.ndarray) -> np.ndarray:
    """Velocities of an ``(n + 2, N, d)`` position window, newest first."""
    vel = window[1:] - window[:-1]
    return np.ascontiguousarray(vel[::-1].transpose(1, 2, 0))


def edge_features(rest_positions, displacements, edges, radius) -> np.ndarray:
    """``[(p_s - p_r) / R, |p_s - p_r| / R]`` per edge, in split form.

    The rest offset and the displacement difference are evaluated separately
    and then summed, so micro-scale displacements are never added to large
    absolute coordinates.
    """
    s, r = edges[:, 0], edges[:, 1]
    rel = (rest_positions[s] - rest_positions[r]) + (displacements[s] - displacements[r])
    out = np.empty((len(edges), rel.shape[1] + 1))
    out[:, :-1] = rel / radius
    out[:, -1] = np.sqrt(np.einsum("ij,ij->i", rel, rel)) / radius
    return out


def absolute_edge_features(positions, edges, radius) -> np.ndarray:
    """Edge features straight from absolute positions (baseline representation)."""
    s, r = edges[:, 0], edges[:, 1]
    rel = positions[s] - positions[r]
    out = np.empty((len(edges), rel.shape[1] + 1))
    out[:, :-1] = rel / radius
    out[:, -1] = np.sqrt(np.einsum("ij,ij->i", rel, rel)) / radius
    return out


def window_features(
    window: np.ndarray,
    rest_positions: np.ndarray,
    edges: np.ndarray,
    radius: float,
    node_types: np.ndarray,
    mode: str = "local",
) -> FeatureGraph:
    """FeatureGraph for the last frame of a position window.

    In ``"local"`` mode ``window`` holds displacements from rest; in
    ``"absolute"`` mode it holds absolute positions as stored.
    """
    if window.ndim != 3 or window.shape[1:] != rest_positions.shape:
        raise ShapeError(f"window shape {window.shape} does not match rest positions {rest_positions.shape}")
    vel = window_velocity(window)
    if mode == "local":
        ef = edge_features(rest_positions, window[-1], edges, radius)
    elif mode == "absolute":
        ef = absolute_edge_features(window[-1], edges, radius)
    else:
        raise ConfigError(f"unknown representation mode {mode!r}")
    return FeatureGraph(edges, vel, np.asarray(node_types), ef, radius)


def assemble_feature_graph(
    traj: Trajectory,
    t: int,
    n: int,
    radius: float,
    node_types=None,
    edges=None,
    mode: str = "local",
    position_dtype=np.float32,
) -> FeatureGraph:
    """FeatureGraph at step ``t`` of a trajectory.

    ``position_dtype`` is the storage precision of absolute positions and is
    only used in ``"absolute"`` mode.
    """
    if t < n + 1:
        raise ConfigError(f"velocity history of depth {n} needs t >= {n + 1}, got t={t}")
    if edges is None:
        edges = build_topology(traj.node_rest_positions, radius)
    node_types = traj.node_types if node_types is None else node_types
    window = traj.local_displacements[t - n - 1 : t + 1]
    if mode == "absolute":
        window = (traj.node_rest_positions[None] + window).astype(position_dtype).astype(np.float64)
    return window_features(window, traj.node_rest_positions, edges, radius, node_types, mode)
