"""Minimal reverse-mode autodiff over numpy arrays."""
from . import ops
from .ops import IndivisibleHeads, NonIntegralOutput, NotDivisibleByPatch
from .tensor import NonScalarLoss, Parameter, ShapeMismatch, Tensor, no_grad

__all__ = [
    "ops",
    "Tensor",
    "no_grad",
    "Parameter",
    "ShapeMismatch",
    "NonScalarLoss",
    "NonIntegralOutput",
    "NotDivisibleByPatch",
    "IndivisibleHeads",
]
