"""Encode-process-decode graph network with an Euler updater."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import nn
from .errors import ConfigError, FormatError, ShapeError
from .graph import FeatureGraph, build_topology, window_features
from .trajectory import ACTUATOR, CLAMPED, NUM_TYPES

MODEL_MAGIC = b"GNSSMDL1"
MODEL_VERSION = 1


@dataclass(frozen=True)
class GnssConfig:
    radius: float
    message_steps: int = 10
    history: int = 4
    latent: int = 64
    mlp_hidden: int = 64
    decoder_hidden: int = 128
    num_types: int = NUM_TYPES
    dim: int = 2
    layer_norm: bool = True
    residual: bool = False
    mode: str = "local"
    position_dtype: str = "float32"

    def __post_init__(self):
        if self.message_steps < 1:
            raise ConfigError("message_steps must be >= 1")
        if not self.radius > 0:
            raise ConfigError("radius must be > 0")
        if self.mode not in ("local", "absolute"):
            raise ConfigError(f"mode must be 'local' or 'absolute', got {self.mode!r}")
        if self.position_dtype not in ("float32", "float64"):
            raise ConfigError("position_dtype must be float32 or float64")

    @property
    def node_input(self) -> int:
        return self.dim * (self.history + 1) + nn.EMBEDDING_DIM

    @property
    def edge_input(self) -> int:
        return self.dim + 1


@dataclass
class GraphBatch:
    """Several feature graphs merged into one disconnected graph."""

    velocity: np.ndarray
    node_types: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray
    sizes: list[int]
    _recv: sp.csr_matrix | None = field(default=None, repr=False)
    _send: sp.csr_matrix | None = field(default=None, repr=False)

    @classmethod
    def from_graphs(cls, graphs: list[FeatureGraph]) -> "GraphBatch":
        offsets = np.cumsum([0] + [g.n_nodes for g in graphs])
        return cls(
            velocity=np.concatenate([g.velocity for g in graphs]),
            node_types=np.concatenate([np.asarray(g.node_types) for g in graphs]),
            edges=np.concatenate([g.edges + o for g, o in zip(graphs, offsets)]),
            edge_features=np.concatenate([g.edge_features for g in graphs]),
            sizes=[g.n_nodes for g in graphs],
        )

    @property
    def n_nodes(self) -> int:
        return self.velocity.shape[0]

    def incidence(self):
        """Sparse (nodes x edges) maps from edges to their receiver / sender."""
        if self._recv is None:
            ne = len(self.edges)
            cols = np.arange(ne)
            ones = np.ones(ne)
            shape = (self.n_nodes, ne)
            self._recv = sp.csr_matrix((ones, (self.edges[:, 1], cols)), shape=shape)
            self._send = sp.csr_matrix((ones, (self.edges[:, 0], cols)), shape=shape)
        return self._recv, self._send


@dataclass
class LatentGraph:
    nodes: np.ndarray
    edges: np.ndarray


class GnssModel:
    """All trainable parameters plus normalisation statistics."""

    def __init__(self, config: GnssConfig, seed=0):
        self.config = config
        c = config
        seeds = np.random.SeedSequence(seed).spawn(4 + 2 * c.message_steps)
        hid = (c.mlp_hidden, c.mlp_hidden)
        ln = c.layer_norm
        self.encoder_node = nn.mlp_init(nn.MlpSpec(c.node_input, hid, c.latent, output_norm=ln), seeds[0])
        self.encoder_edge = nn.mlp_init(nn.MlpSpec(c.edge_input, hid, c.latent, output_norm=ln), seeds[1])
        self.message = [
            nn.mlp_init(nn.MlpSpec(3 * c.latent, hid, c.latent, output_norm=ln), seeds[4 + 2 * m])
            for m in range(c.message_steps)
        ]
        self.update = [
            nn.mlp_init(nn.MlpSpec(2 * c.latent, hid, c.latent, output_norm=ln), seeds[5 + 2 * m])
            for m in range(c.message_steps)
        ]
        self.decoder = nn.mlp_init(
            nn.MlpSpec(c.latent, (c.decoder_hidden, c.decoder_hidden), c.dim), seeds[2]
        )
        self.embedding = nn.embedding_init(c.num_types, seeds[3])
        self.accel_mean = np.zeros(c.dim)
        self.accel_std = np.ones(c.dim)
        self.vel_mean = np.zeros(c.dim)
        self.vel_std = np.ones(c.dim)

    # ---- parameter bookkeeping -------------------------------------------
    def mlps(self) -> list[tuple[str, nn.MlpParams]]:
        out = [("encoder_node", self.encoder_node), ("encoder_edge", self.encoder_edge)]
        for m in range(self.config.message_steps):
            out += [(f"message{m}", self.message[m]), (f"update{m}", self.update[m])]
        out.append(("decoder", self.decoder))
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Live parameter arrays keyed by name, in declaration order."""
        out = {}
        for role, mlp in self.mlps():
            for name, arr in mlp.named():
                out[f"{role}.{name}"] = arr
        out["embedding"] = self.embedding
        return out

    def n_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def copy(self) -> "GnssModel":
        clone = GnssModel.__new__(GnssModel)
        clone.config = self.config

        def dup(p: nn.MlpParams):
            return nn.MlpParams(
                p.spec,
                [w.copy() for w in p.weights],
                [b.copy() for b in p.biases],
                None if p.ln_scale is None else p.ln_scale.copy(),
                None if p.ln_shift is None else p.ln_shift.copy(),
            )

        clone.encoder_node = dup(self.encoder_node)
        clone.encoder_edge = dup(self.encoder_edge)
        clone.message = [dup(p) for p in self.message]
        clone.update = [dup(p) for p in self.update]
        clone.decoder = dup(self.decoder)
        clone.embedding = self.embedding.copy()
        for k in ("accel_mean", "accel_std", "vel_mean", "vel_std"):
            setattr(clone, k, getattr(self, k).copy())
        return clone

    # ---- forward / backward ------------------------------------------------
    def _node_inputs(self, batch: GraphBatch) -> np.ndarray:
        c = self.config
        if batch.velocity.shape[1:] != (c.dim, c.history + 1):
            raise ShapeError(
                f"velocity history shape {batch.velocity.shape[1:]} != {(c.dim, c.history + 1)}"
            )
        vel = (batch.velocity - self.vel_mean[None, :, None]) / self.vel_std[None, :, None]
        emb = nn.embedding_lookup(self.embedding, batch.node_types)
        return np.concatenate([vel.reshape(batch.n_nodes, -1), emb], axis=1)

    def encode(self, batch: GraphBatch, tapes: dict | None = None) -> LatentGraph:
        if batch.edge_features.shape[1:] != (self.config.edge_input,):
            raise ShapeError(f"edge features must have {self.config.edge_input} columns")
        v, tn = nn.mlp_forward(self.encoder_node, self._node_inputs(batch))
        e, te = nn.mlp_forward(self.encoder_edge, batch.edge_features)
        if tapes is not None:
            tapes["encoder_node"], tapes["encoder_edge"] = tn, te
        return LatentGraph(v, e)

    def message_pass_round(self, g: LatentGraph, m: int, batch: GraphBatch, tapes: dict | None = None) -> LatentGraph:
        if not 0 <= m < self.config.message_steps:
            raise ConfigError(f"round {m} outside [0, {self.config.message_steps})")
        s, r = batch.edges[:, 0], batch.edges[:, 1]
        recv, _ = batch.incidence()
        h = self.config.latent
        mlp = self.message[m]
        w0 = mlp.weights[0]
        # first layer of phi on [v_s, v_r, e]: node products are formed once and gathered
        z0 = (g.nodes @ w0[:h])[s] + (g.nodes @ w0[h : 2 * h])[r] + g.edges @ w0[2 * h :] + mlp.biases[0]
        e_new, tm = nn.mlp_forward_preactivated(mlp, z0)
        agg = recv @ e_new
        v_new, tu = nn.mlp_forward(self.update[m], np.concatenate([g.nodes, agg], axis=1), check_finite=False)
        if self.config.residual:
            e_new = e_new + g.edges
            v_new = v_new + g.nodes
        if tapes is not None:
            tapes[f"message{m}"], tapes[f"update{m}"] = tm, tu
            tapes[f"message{m}.inputs"] = g
        return LatentGraph(v_new, e_new)

    def decode(self, g: LatentGraph, tapes: dict | None = None) -> np.ndarray:
        y, td = nn.mlp_forward(self.decoder, g.nodes, check_finite=False)
        if tapes is not None:
            tapes["decoder"] = td
        return y

    def forward(self, batch: GraphBatch):
        """Standardised accelerations ``(N, d)`` and the tape dict for ``backward``."""
        tapes: dict = {}
        g = self.encode(batch, tapes)
        for m in range(self.config.message_steps):
            g = self.message_pass_round(g, m, batch, tapes)
        return self.decode(g, tapes), (tapes, batch)

    def backward(self, tape, upstream: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of all parameters given ``d loss / d output``."""
        tapes, batch = tape
        h = self.config.latent
        recv, send = batch.incidence()
        grads: dict[str, np.ndarray] = {}

        def put(role, gdict):
            for k, v in gdict.items():
                grads[f"{role}.{k}"] = v

        gd, gv = nn.backward(tapes["decoder"], upstream)
        put("decoder", gd)
        ge = np.zeros((len(batch.edges), h))
        for m in range(self.config.message_steps - 1, -1, -1):
            gv_res, ge_res = gv, ge
            gu, gin = nn.backward(tapes[f"update{m}"], gv)
            put(f"update{m}", gu)
            g_msg = ge + gin[:, h:][batch.edges[:, 1]]
            gm, g0 = nn.backward(tapes[f"message{m}"], g_msg)
            g_in = tapes[f"message{m}.inputs"]
            w0 = self.message[m].weights[0]
            g_send, g_recv = send @ g0, recv @ g0
            gm["W0"] = np.concatenate([g_in.nodes.T @ g_send, g_in.nodes.T @ g_recv, g_in.edges.T @ g0])
            put(f"message{m}", gm)
            gv = gin[:, :h] + g_send @ w0[:h].T + g_recv @ w0[h : 2 * h].T
            ge = g0 @ w0[2 * h :].T
            if self.config.residual:
                gv = gv + gv_res
                ge = ge + ge_res
        gn, gx = nn.backward(tapes["encoder_node"], gv)
        put("encoder_node", gn)
        ged, _ = nn.backward(tapes["encoder_edge"], ge)
        put("encoder_edge", ged)
        nvel = self.config.dim * (self.config.history + 1)
        grads["embedding"] = nn.embedding_backward(self.embedding.shape, batch.node_types, gx[:, nvel:])
        return {k: grads[k] for k in self.parameters()}

    # ---- physical-unit prediction -----------------------------------------
    def destandardize(self, y: np.ndarray) -> np.ndarray:
        return y * self.accel_std + self.accel_mean

    def standardize(self, acc: np.ndarray) -> np.ndarray:
        return (acc - self.accel_mean) / self.accel_std


@dataclass
class StateWindow:
    """The last ``n + 2`` position frames in the model's representation."""

    positions: np.ndarray
    node_types: np.ndarray
    rest_positions: np.ndarray
    radius: float
    mode: str = "local"
    edges: np.ndarray | None = None

    def __post_init__(self):
        if self.edges is None:
            self.edges = build_topology(self.rest_positions, self.radius)

    def feature_graph(self) -> FeatureGraph:
        return window_features(
            self.positions, self.rest_positions, self.edges, self.radius, self.node_types, self.mode
        )


def predict_accelerations(window: StateWindow, model: GnssModel) -> np.ndarray:
    """Per-node accelerations in (non-dimensional) position units per step squared."""
    c = model.config
    if window.positions.shape[0] != c.history + 2:
        raise ShapeError(f"window needs {c.history + 2} frames, got {window.positions.shape[0]}")
    if window.mode != c.mode or not np.isclose(window.radius, c.radius, rtol=1e-12):
        raise ConfigError("window mode/radius do not match the model")
    batch = GraphBatch.from_graphs([window.feature_graph()])
    y, _ = model.forward(batch)
    return model.destandardize(y)


def update_state(prev, current, accel, node_types, prescribed=None, pinned=None):
    """Semi-implicit Euler step with unit timestep and kinematic overrides.

    ``prescribed`` maps actuator node ids to their imposed position at
    ``t + 1``; clamped nodes are held at ``pinned`` (zero if omitted).
    Returns ``(next_position, next_velocity)``.
    """
    velocity = (current - prev) + accel
    nxt = current + velocity
    node_types = np.asarray(node_types)
    act = np.flatnonzero(node_types == ACTUATOR)
    if act.size:
        if prescribed is None:
            raise ConfigError("actuator nodes present but no prescribed motion supplied")
        for i in act:
            if i not in prescribed:
                raise ConfigError(f"missing prescribed sample for actuator node {i}")
            nxt[i] = prescribed[i]
    clamp = node_types == CLAMPED
    if clamp.any():
        nxt[clamp] = 0.0 if pinned is None else pinned[clamp]
    velocity = nxt - current
    return nxt, velocity


# ---- checkpoint file -------------------------------------------------------
_HDR = struct.Struct("<8sIIIIIIdIII")


def save_checkpoint(path, model: GnssModel) -> None:
    """Write ``model`` in the GNSSMDL1 layout (see ``load_checkpoint``)."""
    c = model.config
    flags = int(c.layer_norm) | (int(c.residual) << 1) | (int(c.mode == "absolute") << 2) | (
        int(c.position_dtype == "float64") << 3
    )
    parts = [
        _HDR.pack(MODEL_MAGIC, MODEL_VERSION, c.message_steps, c.history, c.latent, c.mlp_hidden,
                  c.decoder_hidden, c.radius, c.num_types, c.dim, flags)
    ]
    for arr in (model.accel_mean, model.accel_std, model.vel_mean, model.vel_std):
        parts.append(np.asarray(arr, "<f8").tobytes())
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, "<f8").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def parse_checkpoint(data: bytes) -> GnssModel:
    """Decode a GNSSMDL1 byte string.

    Layout: magic, u32 version, u32 M, u32 n, u32 latent, u32 mlp hidden,
    u32 decoder hidden, f64 R, u32 num_types, u32 d, u32 flags
    (bit0 layer norm, bit1 residual, bit2 absolute mode, bit3 f64 positions),
    then f64[d] x 4 statistics (accel mean/std, velocity mean/std), u32 blob
    count and per blob: u16 name length, name, u32 ndim, u32[ndim] shape,
    f64 data. A u32 CRC-32 of everything before it closes the file.
    """
    if data[:8] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MODEL_MAGIC!r}", offset=0)
    if len(data) < _HDR.size + 4:
        raise FormatError("truncated header", offset=len(data))
    stored = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) != stored:
        raise FormatError("checksum mismatch", offset=len(data) - 4)
    (_, version, m, n, latent, hidden, dec_hidden, radius, num_types, dim, flags) = _HDR.unpack_from(data)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    config = GnssConfig(
        radius=radius, message_steps=m, history=n, latent=latent, mlp_hidden=hidden,
        decoder_hidden=dec_hidden, num_types=num_types, dim=dim, layer_norm=bool(flags & 1),
        residual=bool(flags & 2), mode="absolute" if flags & 4 else "local",
        position_dtype="float64" if flags & 8 else "float32",
    )
    model = GnssModel(config, seed=0)
    off = _HDR.size
    stats = []
    for _ in range(4):
        stats.append(np.frombuffer(data, "<f8", dim, off).copy())
        off += 8 * dim
    model.accel_mean, model.accel_std, model.vel_mean, model.vel_std = stats
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = model.parameters()
    if count != len(params):
        raise FormatError(f"expected {len(params)} parameter blobs, found {count}", offset=off)
    for name, arr in params.items():
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        got = data[off : off + ln].decode()
        off += ln
        if got != name:
            raise FormatError(f"blob {got!r} where {name!r} was expected", offset=off)
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        if tuple(shape) != arr.shape:
            raise FormatError(f"blob {name} has shape {shape}, expected {arr.shape}", offset=off)
        arr[...] = np.frombuffer(data, "<f8", arr.size, off).reshape(arr.shape)
        off += 8 * arr.size
    return model


def load_checkpoint(path) -> GnssModel:
    return parse_checkpoint(Path(path).read_bytes())
