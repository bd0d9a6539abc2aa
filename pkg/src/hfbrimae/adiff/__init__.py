from .nn import (
    BatchNorm,
    Dropout,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    TransformerBlock,
    multi_head_attention,
)
from .optim import AdamW, adamw_step, cosine_lr, init_adamw_state
from .tensor import (
    Tensor,
    add,
    as_tensor,
    batch_norm,
    concat,
    cross_entropy,
    custom_op,
    dropout,
    gather_rows,
    gelu,
    get_dtype,
    layer_norm,
    linear,
    log_softmax_lastdim,
    matmul,
    max_over_axis,
    mean_over_axis,
    no_grad,
    precision,
    relu,
    reshape,
    scale,
    set_dtype,
    softmax_lastdim,
    stack,
    sum_,
    take_along,
    transpose,
)

__all__ = [
    "AdamW", "BatchNorm", "Dropout", "FeedForward", "LayerNorm", "Linear", "Module",
    "MultiHeadAttention", "Parameter", "Tensor", "TransformerBlock", "adamw_step", "add",
    "as_tensor", "batch_norm", "concat", "cosine_lr", "cross_entropy", "custom_op", "dropout",
    "gather_rows", "gelu", "get_dtype", "init_adamw_state", "layer_norm", "linear",
    "log_softmax_lastdim", "matmul", "max_over_axis", "mean_over_axis", "multi_head_attention",
    "no_grad", "precision", "relu", "reshape", "scale", "set_dtype", "softmax_lastdim", "stack",
    "sum_", "take_along", "transpose",
]
