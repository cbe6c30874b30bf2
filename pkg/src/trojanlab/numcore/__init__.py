from .fd import numeric_grad, rel_error
from .pca import DegenerateCovarianceError, pca_components, pca_fit_transform
from .rng import Rng
from .tensor import (
    DimensionError,
    GradTape,
    TapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    cross_entropy,
    grad,
    matmul,
    mse,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax,
    sub,
    take,
)

__all__ = [
    "DegenerateCovarianceError",
    "DimensionError",
    "GradTape",
    "Rng",
    "TapeError",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "cross_entropy",
    "grad",
    "matmul",
    "mse",
    "mul",
    "numeric_grad",
    "pca_components",
    "pca_fit_transform",
    "reduce_mean",
    "reduce_sum",
    "rel_error",
    "relu",
    "reshape",
    "softmax",
    "sub",
    "take",
]
