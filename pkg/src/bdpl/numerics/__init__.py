"""Differentiable dense-array substrate: tensors, a recording tape, Adam."""

from . import kernels
from . import tensor as F
from .gradcheck import GradCheckError, grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import (
    OPS,
    ShapeError,
    SparseMatrix,
    Tape,
    Tensor,
    apply_primitive,
    force_eval,
    layer_norm_rows,
    sparse_matmul,
)

__all__ = [
    "Adam",
    "AdamState",
    "F",
    "GradCheckError",
    "OPS",
    "ShapeError",
    "SparseMatrix",
    "Tape",
    "Tensor",
    "adam_step",
    "apply_primitive",
    "force_eval",
    "grad_check",
    "kernels",
    "layer_norm_rows",
    "sparse_matmul",
]
