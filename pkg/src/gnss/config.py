"""Flat ``key = value`` run configuration with a fixed, documented schema.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown or repeated keys are rejected. Run ``gnss keys`` for the full list.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .beam import ExcitationSpec, MaterialSection
from .errors import ConfigError
from .model import GnssConfig
from .training import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str


SCHEMA: dict[str, Key] = {
    # geometry, material and excitation
    "length_m": Key(float, 0.160, "beam length between the clamps"),
    "element_size_m": Key(float, 0.0008, "element length; length_m / element_size_m must be an integer"),
    "e_pa": Key(float, 72e9, "Young's modulus"),
    "rho": Key(float, 2900.0, "density in kg/m^3"),
    "nu": Key(float, 0.3, "Poisson ratio"),
    "width_m": Key(float, 5e-3, "section width"),
    "height_m": Key(float, 1e-3, "section height (bending direction)"),
    "freq_hz": Key(float, 50e3, "centre frequency of the Hanning-windowed burst"),
    "cycles": Key(int, 1, "sine cycles in the burst"),
    "amplitude_m": Key(float, 1e-6, "peak prescribed actuator displacement"),
    "actuator_pos_m": Key(
        _floats, (0.060, 0.070, 0.080, 0.090, 0.100, 0.075),
        "comma-separated actuator positions from the left clamp, one trajectory each",
    ),
    "total_time_s": Key(float, 100e-6, "simulated time span"),
    "dt_s": Key(float, 1e-7, "integration increment; must not exceed the stable increment"),
    "dt_ph_s": Key(float, 0.0, "storage interval (0 means dt_s); an integer multiple of dt_s"),
    "margin_m": Key(float, 0.040, "clamp-side margin removed by the reflection-free window (0 keeps all nodes)"),
    "origin_x_m": Key(float, 0.0, "global x of the left clamp"),
    "origin_y_m": Key(float, 0.05, "global y of the beam axis"),
    # model
    "radius_multiple": Key(float, 7.0, "connectivity radius in element lengths"),
    "message_steps": Key(int, 10, "message-passing rounds M"),
    "history": Key(int, 4, "previous velocities n in the node features"),
    "layer_norm": Key(_bool, True, "layer normalisation on encoder and processor outputs"),
    "residual": Key(_bool, False, "residual connections across message-passing rounds"),
    "mode": Key(_choice("local", "absolute"), "local", "position representation of the node states"),
    "position_dtype": Key(_choice("float32", "float64"), "float32", "storage precision of absolute positions"),
    # training
    "batch_size": Key(int, 2, "samples per optimizer step"),
    "steps": Key(int, 3000, "optimizer steps"),
    "noise_fraction": Key(float, 0.095, "velocity noise std as a fraction of the reference scale"),
    "noise_reference": Key(
        _choice("increment", "displacement"), "increment",
        "reference scale: max per-step increment or max displacement",
    ),
    "penalty_s": Key(float, 1.5, "sign-disagreement weight of the loss (>= 1)"),
    "lr": Key(float, 1e-4, "initial learning rate"),
    "lr_final": Key(float, 1e-6, "learning rate reached at the last step"),
    "val_every": Key(int, 500, "validation cadence in steps (0 validates only at the end)"),
    "val_samples": Key(int, 32, "one-step validation samples"),
    "checkpoint_every": Key(int, 0, "checkpoint cadence in steps (0 disables)"),
    "seed": Key(int, 0, "seed for parameter initialisation, sampling and noise"),
    # rollout and evaluation
    "rollout_steps": Key(int, 0, "rollout length in frames (0 uses the full test trajectory)"),
    "accept_relative_mse": Key(
        float, 0.25, "pipeline acceptance: rollout MSE divided by the peak true displacement"
    ),
}


class RunConfig(dict):
    """Mapping of every schema key to its (parsed or default) value."""

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name) from None

    def section(self) -> MaterialSection:
        return MaterialSection(self.e_pa, self.rho, self.nu, self.width_m, self.height_m)

    def excitation(self) -> ExcitationSpec:
        return ExcitationSpec(self.freq_hz, self.cycles, self.amplitude_m)

    def model_config(self) -> GnssConfig:
        return GnssConfig(
            radius=self.radius_multiple * self.element_size_m,
            message_steps=self.message_steps,
            history=self.history,
            layer_norm=self.layer_norm,
            residual=self.residual,
            mode=self.mode,
            position_dtype=self.position_dtype,
        )

    def train_config(self, checkpoint_path=None) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            steps=self.steps,
            noise_fraction=self.noise_fraction,
            noise_reference=self.noise_reference,
            penalty_s=self.penalty_s,
            lr=self.lr,
            lr_final=self.lr_final,
            seed=self.seed,
            val_every=self.val_every,
            val_samples=self.val_samples,
            checkpoint_every=self.checkpoint_every,
            checkpoint_path=checkpoint_path,
        )

    def dumps(self) -> str:
        lines = []
        for key in SCHEMA:
            v = self[key]
            if isinstance(v, tuple):
                v = ",".join(f"{x:g}" for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse config text; ``overrides`` (raw strings) win over the file."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: key {key!r} repeated (first on line {raw[key][1]})")
        raw[key] = (value, lineno)
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = (value, 0)
    cfg = RunConfig({k: spec.default for k, spec in SCHEMA.items()})
    for key, (value, lineno) in raw.items():
        try:
            cfg[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            where = f"line {lineno}: " if lineno else ""
            raise ConfigError(f"{where}bad value for {key!r}: {exc}") from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    positive = ("length_m", "element_size_m", "freq_hz", "total_time_s", "dt_s", "radius_multiple")
    for key in positive:
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be > 0")
    for key in ("margin_m", "amplitude_m", "noise_fraction", "dt_ph_s"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    for key in ("steps", "val_every", "checkpoint_every", "rollout_steps"):
        if cfg[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    if cfg.batch_size < 1 or cfg.message_steps < 1 or cfg.history < 0:
        raise ConfigError("batch_size and message_steps must be >= 1, history >= 0")
    if cfg.penalty_s < 1:
        raise ConfigError("penalty_s must be >= 1")
    pos = cfg.actuator_pos_m
    if len(set(pos)) != len(pos):
        raise ConfigError(f"duplicate actuator positions in {pos}")


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def describe_schema() -> str:
    width = max(map(len, SCHEMA))
    return "\n".join(f"{k:<{width}}  {s.doc} (default {s.default})" for k, s in SCHEMA.items())
