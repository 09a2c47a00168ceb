"""RepLKNet graphs: build, run, count, re-parameterize, serialize."""
from .arch import PRESETS, ArchSpec
from .build import build, dw_stack
from .deploy import reparam_model
from .graph import (
    LayerGraph,
    MissingWeightsError,
    ModelWeights,
    Node,
    count,
    forward,
    init_weights,
    vjp,
)
from .io import ChecksumError, FormatError, TruncatedError, VersionError, WeightFileError, load, save

__all__ = [
    "ArchSpec",
    "PRESETS",
    "LayerGraph",
    "Node",
    "ModelWeights",
    "MissingWeightsError",
    "build",
    "dw_stack",
    "forward",
    "vjp",
    "count",
    "init_weights",
    "reparam_model",
    "save",
    "load",
    "WeightFileError",
    "FormatError",
    "VersionError",
    "TruncatedError",
    "ChecksumError",
]
