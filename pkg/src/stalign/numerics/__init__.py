from .functional import conv2d, mean_pool, scaled_dot_product_attention
from .gradcheck import check_parameters, grad_check, relative_error
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    dropout,
    embedding_lookup,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    multiply,
    neg,
    no_grad,
    relu,
    reshape,
    scale,
    softmax,
    square,
    sub,
    swapaxes,
    transpose,
    tmean,
    tsum,
)

__all__ = [
    "Rng", "Tensor", "add", "as_tensor", "check_parameters", "concat", "conv2d", "div",
    "dropout", "embedding_lookup", "exp", "gelu", "getitem", "grad_check",
    "is_grad_enabled", "l2_normalize", "layer_norm", "log", "log_softmax", "matmul",
    "mean_pool", "mul", "multiply", "neg", "no_grad", "relative_error", "relu",
    "reshape", "scale", "scaled_dot_product_attention", "softmax", "square", "sub",
    "swapaxes", "tmean", "transpose", "tsum",
]
