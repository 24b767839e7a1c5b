from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .params import ParamStore, adam_step
from .tensor import (
    Tensor,
    add,
    backward,
    batch_norm,
    bilinear_upsample,
    clamp,
    concat_channels,
    conv2d,
    index_scalar,
    log,
    max_pool3x3,
    mean_all,
    mul,
    neg,
    op_count,
    pow_const,
    relu,
    reset_op_count,
    softmax_channels,
    sum_channels,
)

__all__ = [
    "Tensor", "ParamStore", "adam_step", "backward", "conv2d", "batch_norm",
    "relu", "max_pool3x3", "concat_channels", "bilinear_upsample",
    "softmax_channels", "add", "mul", "neg", "log", "clamp", "pow_const",
    "sum_channels", "mean_all", "index_scalar", "op_count", "reset_op_count",
    "save_checkpoint", "load_checkpoint", "restore_into",
]
