"""Large-kernel depth-wise convolution toolkit: conv engine, re-parameterization,
RepLKNet graphs and effective receptive field analysis."""
from .conv import BACKENDS, ConvSpec, ConvWeights, conv2d, conv2d_vjp_input, flops_of, params_of
from .kernels import HAVE_EXTENSION, IMPLEMENTATION
from .reparam import (
    BNParams,
    BranchedConv,
    ReparamError,
    aggregate_kernel,
    center_pad,
    densify_dilated,
    fuse_bn,
    merge_branches,
)
from .tensor import Normal, Rng, ShapeError, Uniform

__version__ = "0.1.0"

__all__ = [
    "BACKENDS",
    "ConvSpec",
    "ConvWeights",
    "conv2d",
    "conv2d_vjp_input",
    "params_of",
    "flops_of",
    "HAVE_EXTENSION",
    "IMPLEMENTATION",
    "BNParams",
    "BranchedConv",
    "ReparamError",
    "fuse_bn",
    "center_pad",
    "merge_branches",
    "densify_dilated",
    "aggregate_kernel",
    "Rng",
    "Normal",
    "Uniform",
    "ShapeError",
]
