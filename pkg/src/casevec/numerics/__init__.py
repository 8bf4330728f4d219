"""Dense-tensor engine: reverse-mode autodiff, optimizer, and checkpoints."""

from .autograd import (
    DimMismatch,
    NonScalarLoss,
    ShapeMismatch,
    Tensor,
    add,
    backward,
    concat,
    dropout,
    embedding,
    gather_rows,
    gelu,
    grad_check,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    pick,
    reshape,
    softmax,
    tensor_sum,
    transpose,
)
from .optim import AdamW, lr_schedule
from .serialize import load_checkpoint, save_checkpoint

__all__ = [
    "AdamW",
    "DimMismatch",
    "NonScalarLoss",
    "ShapeMismatch",
    "Tensor",
    "add",
    "backward",
    "concat",
    "dropout",
    "embedding",
    "gather_rows",
    "gelu",
    "grad_check",
    "layer_norm",
    "load_checkpoint",
    "log_softmax",
    "lr_schedule",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pick",
    "reshape",
    "save_checkpoint",
    "softmax",
    "tensor_sum",
    "transpose",
]
