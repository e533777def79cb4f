"""Reverse-mode automatic differentiation over dense float64 tensors."""
from . import aftn, ops
from .gradcheck import GradCheckReport, finite_diff_check, finite_diff_report
from .params import ParameterStore
from .rng import Streams
from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "GradCheckReport",
    "ParameterStore",
    "Streams",
    "Tensor",
    "aftn",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "finite_diff_report",
    "grad_enabled",
    "no_grad",
    "ops",
]
