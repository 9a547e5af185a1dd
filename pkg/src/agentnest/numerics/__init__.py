"""Differentiable numeric core: tape autodiff, layers, optimizer, oracle."""

from .tensor import Tensor, concat, stack, no_grad, where_mask
from .store import ParameterStore
from .adam import Adam
from .gradcheck import grad_check, GradCheckReport
from . import tensor
from . import layers
from . import checkpoint

__all__ = [
    "Tensor",
    "ParameterStore",
    "Adam",
    "grad_check",
    "GradCheckReport",
    "tensor",
    "layers",
    "checkpoint",
    "concat",
    "stack",
    "no_grad",
    "where_mask",
]
