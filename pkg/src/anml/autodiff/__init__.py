"""Reverse-mode autodiff over numpy arrays with differentiable backward passes."""

from . import ops
from .engine import (
    Graph,
    GraphError,
    NonFiniteError,
    Tensor,
    backward,
    default_dtype,
    grad_mode,
    graph_of,
    is_recording,
    no_grad,
    precision,
    set_debug,
)
from .gradcheck import finite_difference_grad, relative_error
from .ops import FORWARD_OPS, forward_op

__all__ = [
    "FORWARD_OPS",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "Tensor",
    "backward",
    "default_dtype",
    "finite_difference_grad",
    "forward_op",
    "grad_mode",
    "graph_of",
    "is_recording",
    "no_grad",
    "ops",
    "precision",
    "relative_error",
    "set_debug",
]
