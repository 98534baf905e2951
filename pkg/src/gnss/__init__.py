"""Graph-network surrogate for transient wave propagation in beams."""

from .beam import (
    BeamModel,
    ExcitationSpec,
    MaterialSection,
    build_beam_model,
    dispersion_wavelength,
    extract_dataset_window,
    run_explicit,
    stable_increment,
)
from .errors import ConfigError, FormatError, GnssError, NumericalDivergence, ShapeError, StabilityError
from .graph import FeatureGraph, assemble_feature_graph, build_topology
from .model import GnssConfig, GnssModel, load_checkpoint, save_checkpoint
from .rollout import RolloutReport, RolloutResult, evaluate, rollout, rollout_mse
from .trajectory import Trajectory, read_trajectory, write_trajectory

__all__ = [
    "BeamModel", "ConfigError", "ExcitationSpec", "FeatureGraph", "FormatError", "GnssConfig",
    "GnssError", "GnssModel", "MaterialSection", "NumericalDivergence", "RolloutReport",
    "RolloutResult", "ShapeError", "StabilityError", "Trajectory", "assemble_feature_graph",
    "build_beam_model", "build_topology", "dispersion_wavelength", "evaluate",
    "extract_dataset_window", "load_checkpoint", "read_trajectory", "rollout", "rollout_mse",
    "run_explicit", "save_checkpoint", "stable_increment", "write_trajectory",
]
