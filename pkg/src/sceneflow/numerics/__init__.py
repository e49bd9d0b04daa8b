"""Array numerics: autodiff tensors, parameter stores, reproducible RNG."""

from .gradcheck import GradCheckReport, GradientMissingError, grad_check
from .params import ParamStore
from .rng import RngStream
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    absolute,
    affine_norm,
    broadcast_to,
    concat,
    exp,
    gather_rows,
    layer_norm,
    leaky_relu,
    linear,
    log,
    matmul,
    narrow,
    no_grad,
    normalize,
    parameter,
    pow_const,
    relu,
    reshape,
    softmax,
    softmax_lastdim,
    sqrt,
    tmax,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "DEFAULT_DTYPE",
    "GradCheckReport",
    "GradientMissingError",
    "ParamStore",
    "RngStream",
    "Tensor",
    "absolute",
    "affine_norm",
    "broadcast_to",
    "concat",
    "exp",
    "gather_rows",
    "grad_check",
    "layer_norm",
    "leaky_relu",
    "linear",
    "log",
    "matmul",
    "narrow",
    "no_grad",
    "normalize",
    "parameter",
    "pow_const",
    "relu",
    "reshape",
    "softmax",
    "softmax_lastdim",
    "sqrt",
    "tmax",
    "tmean",
    "transpose",
    "tsum",
]

# `gaussian(rng, shape)` is the module-level draw contract; the stream method
# is the implementation.
def gaussian(rng: RngStream, shape, dtype=DEFAULT_DTYPE):
    return rng.gaussian(shape, dtype=dtype)
