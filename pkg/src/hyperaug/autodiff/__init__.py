"""Reverse-mode automatic differentiation on a dynamic tape."""
from . import ops
from .ops import record
from .params import CurvatureGraph, ModelParams, flat_grad, hvp, mixed_hvp
from .tensor import (
    GradError,
    NodeMonitor,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    get_default_dtype,
    grad,
    live_nodes,
    no_record,
    precision,
    set_default_dtype,
)


def backward(output, wrt, retain=False):
    """Gradients of scalar ``output`` w.r.t. ``wrt``; see :func:`grad`."""
    return grad(output, wrt, retain=retain)


__all__ = [
    "ops", "record", "backward", "grad", "hvp", "mixed_hvp", "CurvatureGraph",
    "ModelParams", "flat_grad", "Tape", "Tensor", "as_tensor", "TapeError",
    "ShapeError", "GradError", "NodeMonitor", "live_nodes", "no_record",
    "precision", "get_default_dtype", "set_default_dtype",
]
