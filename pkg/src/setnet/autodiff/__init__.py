"""Rank-3 float64 tensors with define-by-run reverse-mode differentiation."""

from __future__ import annotations

from setnet.autodiff.ops import PRIMITIVES, Function, primitive_forward
from setnet.autodiff.tape import GradMap, Node, Tape, backward, current_tape
from setnet.autodiff.tensor import SetBatch, Tensor

__all__ = [
    "PRIMITIVES",
    "Function",
    "GradMap",
    "Node",
    "SetBatch",
    "Tape",
    "Tensor",
    "backward",
    "current_tape",
    "primitive_forward",
]
