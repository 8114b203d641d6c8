from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    concat,
    debug_mode,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    max_,
    mean,
    mul,
    neg,
    power,
    precision,
    relu,
    reshape,
    set_debug,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    take,
    tanh,
    tensor,
    transpose,
)
from .functional import l2_normalize, linear, scaled_dot_product_attention, soft_cross_entropy
from .nn import LayerNorm, Linear, MLP, Module, Parameter
from .optim import AdamW, OptimizerState, adamw_step, clip_grad_norm, cosine_lr

__all__ = [name for name in dir() if not name.startswith("_")]
