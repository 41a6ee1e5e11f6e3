"""Minimal float64 tensor numerics with reverse-mode differentiation."""

from .gradcheck import check_gradients
from .optim import Adam, cosine_warmup_lr
from .tensor import (
    DTYPE,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cos,
    div,
    elu,
    exp,
    gather,
    getitem,
    l1_norm,
    l2_norm,
    layer_norm,
    leaky_relu,
    log,
    log_sigmoid,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    minimum,
    modulus,
    mul,
    neg,
    normalize,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
