"""Minimal reverse-mode differentiation over dense float64 arrays."""

from . import ops
from .checkpoint import format_params, load_params, parse_params, save_params
from .gradcheck import GradCheckReport, grad_check, rel_error
from .ops import (
    add,
    add_scalar,
    bias_add,
    concat,
    constant,
    div,
    exp,
    expand,
    gather,
    layer_norm,
    log,
    log_softmax_rows,
    matmul,
    max_reduce,
    mean_reduce,
    mul,
    relu,
    reshape,
    scalar_mul,
    softmax_kl_rows,
    soft_bins,
    softmax_rows,
    sqrt,
    square,
    sub,
    sum_reduce,
    swapaxes,
    take,
    xlogx,
)
from .tensor import Tape, Tensor, as_tensor, backward

__all__ = [name for name in dir() if not name.startswith("_")]
