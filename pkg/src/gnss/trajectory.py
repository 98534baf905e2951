"""Trajectory container and the GNSSTRJ1 binary file format.

Layout (little-endian)::

    b"GNSSTRJ1"                 magic, 8 bytes
    u32 N, u32 T, u32 d (=2)
    f64 dt_ph
    f64[N, 2]                   rest positions
    u32[N]                      node types
    u32[N]                      reserved (zero)
    f64[T, N, 2]                local displacements, time-major
    u32                         CRC-32 of all preceding bytes (optional trailer)

Files written here always carry the trailer; readers accept files without it
and report the checksum as absent.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GNSSTRJ1"
_HEADER = struct.Struct("<8sIIId")

# Node type ids.
FREE = 0
ACTUATOR = 1
CLAMPED = 2
NUM_TYPES = 8


@dataclass
class Trajectory:
    """Nodal displacement history expressed in node-fixed local frames.

    ``local_displacements[t, i]`` is the displacement of node ``i`` from its rest
    position ``node_rest_positions[i]`` at time ``t * dt_ph``.
    """

    dt_ph: float
    node_rest_positions: np.ndarray
    node_types: np.ndarray
    local_displacements: np.ndarray
    actuator_node: int | None = field(default=None)

    def __post_init__(self):
        self.node_rest_positions = np.ascontiguousarray(self.node_rest_positions, dtype=np.float64)
        self.node_types = np.ascontiguousarray(self.node_types, dtype=np.int64)
        self.local_displacements = np.ascontiguousarray(self.local_displacements, dtype=np.float64)
        n = self.node_rest_positions.shape[0]
        if self.node_rest_positions.shape != (n, 2):
            raise FormatError(f"rest positions must be (N, 2), got {self.node_rest_positions.shape}")
        if self.node_types.shape != (n,):
            raise FormatError(f"node types must be (N,), got {self.node_types.shape}")
        if self.local_displacements.ndim != 3 or self.local_displacements.shape[1:] != (n, 2):
            raise FormatError(
                f"displacements must be (T, {n}, 2), got {self.local_displacements.shape}"
            )
        if self.local_displacements.shape[0] and np.any(self.local_displacements[0] != 0.0):
            raise FormatError("local frames are anchored at t = 0: the first frame must be all zero")
        if self.actuator_node is None:
            act = np.flatnonzero(self.node_types == ACTUATOR)
            if act.size:
                self.actuator_node = int(act[0])

    @property
    def n_nodes(self) -> int:
        return self.node_rest_positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.local_displacements.shape[0]

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt_ph

    def absolute_positions(self, dtype=np.float64) -> np.ndarray:
        """Absolute positions ``rest + u`` rounded to ``dtype`` storage."""
        return (self.node_rest_positions[None] + self.local_displacements).astype(dtype)

    def truncated(self, n_steps: int) -> "Trajectory":
        return Trajectory(
            self.dt_ph,
            self.node_rest_positions,
            self.node_types,
            self.local_displacements[:n_steps],
            self.actuator_node,
        )


def _payload(traj: Trajectory) -> bytes:
    n, t = traj.n_nodes, traj.n_steps
    parts = [
        _HEADER.pack(MAGIC, n, t, 2, float(traj.dt_ph)),
        traj.node_rest_positions.astype("<f8").tobytes(),
        traj.node_types.astype("<u4").tobytes(),
        np.zeros(n, dtype="<u4").tobytes(),
        traj.local_displacements.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def write_trajectory(path, traj: Trajectory) -> None:
    body = _payload(traj)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _sections(n: int, t: int):
    """(name, byte length) for each section following the fixed header."""
    return [
        ("rest positions", 16 * n),
        ("node types", 4 * n),
        ("reserved", 4 * n),
        ("local displacements", 16 * n * t),
    ]


def parse_trajectory(data: bytes, verify: bool = True) -> tuple[Trajectory, str]:
    """Decode a GNSSTRJ1 byte string.

    Returns the trajectory and a checksum status: ``"ok"``, ``"absent"``.
    Raises ``FormatError`` on bad magic, truncation, or checksum mismatch
    (the latter only when ``verify`` is set).
    """
    if len(data) < 8:
        raise FormatError("file too short for magic", offset=len(data))
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    _, n, t, d, dt_ph = _HEADER.unpack_from(data, 0)
    if d != 2:
        raise FormatError(f"unsupported dimension d={d}", offset=16)
    offset = _HEADER.size
    chunks = {}
    for name, size in _sections(n, t):
        if len(data) < offset + size:
            raise FormatError(f"truncated file: missing section '{name}'", offset=len(data))
        chunks[name] = data[offset : offset + size]
        offset += size
    rest = len(data) - offset
    status = "absent"
    if rest == 4:
        (stored,) = struct.unpack_from("<I", data, offset)
        actual = zlib.crc32(data[:offset])
        if stored != actual:
            if verify:
                raise FormatError(
                    f"checksum mismatch: stored {stored:08x}, computed {actual:08x}", offset=offset
                )
            status = "mismatch"
        else:
            status = "ok"
    elif rest != 0:
        raise FormatError(f"{rest} unexpected trailing bytes", offset=offset)
    traj = Trajectory(
        dt_ph=dt_ph,
        node_rest_positions=np.frombuffer(chunks["rest positions"], "<f8").reshape(n, 2),
        node_types=np.frombuffer(chunks["node types"], "<u4").astype(np.int64),
        local_displacements=np.frombuffer(chunks["local displacements"], "<f8").reshape(t, n, 2),
    )
    return traj, status


def read_trajectory(path) -> Trajectory:
    traj, _ = parse_trajectory(Path(path).read_bytes())
    return traj


def checksum(path) -> str:
    return f"{zlib.crc32(Path(path).read_bytes()):08x}"
