"""Named parameter collections and Hessian-vector products."""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np

from . import ops
from .tensor import Tape, Tensor, grad

__all__ = ["ModelParams", "CurvatureGraph", "hvp", "mixed_hvp", "flat_grad"]


class ModelParams:
    """Ordered, named collection of parameter arrays (or tensors).

    The flat view concatenates the tensors in insertion order, so
    ``flatten``/``unflatten`` round-trip bit-exactly.
    """

    def __init__(self, tensors: Mapping[str, object] | Iterable[tuple[str, object]]):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self.tensors: OrderedDict[str, object] = OrderedDict(items)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def __repr__(self):
        shapes = ", ".join(f"{k}={_shape(v)}" for k, v in self.tensors.items())
        return f"ModelParams({shapes})"

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> list:
        return list(self.tensors.values())

    @property
    def total_dim(self) -> int:
        return int(sum(int(np.prod(_shape(v))) for v in self.tensors.values()))

    def replace(self, values) -> "ModelParams":
        """Same names, new values (e.g. tape-linked tensors)."""
        values = list(values)
        if len(values) != len(self.tensors):
            raise ValueError(f"expected {len(self.tensors)} values, got {len(values)}")
        return type(self)(zip(self.tensors, values))

    def flatten(self) -> np.ndarray:
        parts = [np.asarray(_data(v)).reshape(-1) for v in self.tensors.values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, vec) -> "ModelParams":
        vec = np.asarray(vec)
        if vec.shape != (self.total_dim,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({self.total_dim},)")
        out, start = [], 0
        for v in self.tensors.values():
            shape = _shape(v)
            n = int(np.prod(shape))
            out.append(vec[start : start + n].reshape(shape).copy())
            start += n
        return self.replace(out)

    def split(self, vec) -> list[np.ndarray]:
        return self.unflatten(vec).arrays()

    def copy(self) -> "ModelParams":
        return self.replace([np.array(_data(v), copy=True) for v in self.tensors.values()])

    def permuted(self, order) -> "ModelParams":
        names = [self.names[i] for i in order]
        return type(self)((n, self.tensors[n]) for n in names)

    def as_variables(self, tape: Tape) -> tuple["ModelParams", list[Tensor]]:
        variables = [tape.variable(_data(v)) for v in self.tensors.values()]
        return self.replace(variables), variables


def _data(v):
    return v.data if isinstance(v, Tensor) else v


def _shape(v):
    return tuple(np.shape(_data(v)))


def flat_grad(grads: list[Tensor]) -> np.ndarray:
    return np.concatenate([g.data.reshape(-1) for g in grads]) if grads else np.zeros(0)


def _check_dim(v, dim, what):
    v = np.asarray(v)
    if v.shape != (dim,):
        raise ValueError(f"{what}: vector has shape {v.shape}, expected ({dim},)")
    return v


def _inner(vec: np.ndarray, params: ModelParams, grads: list[Tensor]) -> Tensor:
    pieces = params.split(vec.astype(grads[0].dtype, copy=False))
    total = None
    for piece, g in zip(pieces, grads):
        term = ops.dot(g, piece)
        total = term if total is None else total + term
    return total


class CurvatureGraph:
    """One recorded ``f`` plus its tape-linked gradient, reused across products.

    Building the graph costs one forward and one backward pass; every
    Hessian-vector or mixed product afterwards is a single extra backward
    sweep, and only a handful of nodes are appended per product.

    Parameters
    ----------
    f_builder : callable
        ``f_builder(theta)`` or, when ``hyper`` is given,
        ``f_builder(theta, hyper)``; receives parameter collections whose
        values are tape-linked tensors and returns a scalar tensor.
    params : ModelParams
        Point at which derivatives are taken.
    hyper : parameter collection, optional
        Second argument group (anything with ``as_variables``).
    """

    def __init__(self, f_builder: Callable, params: ModelParams, hyper=None):
        self.tape = Tape()
        self.params = params
        self.hyper = hyper
        theta_view, self.theta = params.as_variables(self.tape)
        if hyper is None:
            self.phi = []
            f = f_builder(theta_view)
        else:
            phi_view, self.phi = hyper.as_variables(self.tape)
            f = f_builder(theta_view, phi_view)
        self.f = f
        self.value = float(np.asarray(_data(f)))
        if isinstance(f, Tensor) and f.tape is not None:
            self.grad_theta = grad(f, self.theta, retain=True, create_graph=True)
        else:
            self.grad_theta = [Tensor(np.zeros_like(t.data)) for t in self.theta]
        self.products = 0

    @property
    def dim(self) -> int:
        return self.params.total_dim

    def gradient(self) -> np.ndarray:
        return flat_grad(self.grad_theta)

    def hvp(self, v) -> np.ndarray:
        """(d2f / dtheta2) v."""
        v = _check_dim(v, self.dim, "hvp")
        self.products += 1
        if not any(g.tape is not None for g in self.grad_theta):
            return np.zeros(self.dim, dtype=self.grad_theta[0].dtype)
        out = grad(_inner(v, self.params, self.grad_theta), self.theta, retain=True, create_graph=False)
        return flat_grad(out)

    def mixed(self, v) -> np.ndarray:
        """v^T (d2f / dtheta dphi), a vector of length dim(phi)."""
        v = _check_dim(v, self.dim, "mixed_hvp")
        self.products += 1
        n = int(sum(p.size for p in self.phi))
        if not any(g.tape is not None for g in self.grad_theta):
            return np.zeros(n, dtype=self.grad_theta[0].dtype)
        out = grad(_inner(v, self.params, self.grad_theta), self.phi, retain=True, create_graph=False)
        return flat_grad(out)


def hvp(f_builder: Callable, params: ModelParams, v) -> np.ndarray:
    """Hessian-vector product via the gradient of ``<v, grad f>``.

    Never materialises the M x M Hessian; extra memory is the tape of one
    double-backward pass plus O(M) vectors.
    """
    _check_dim(v, params.total_dim, "hvp")
    return CurvatureGraph(f_builder, params).hvp(v)


def mixed_hvp(f_builder: Callable, params: ModelParams, hyper, v) -> np.ndarray:
    """``v^T d2f/(dtheta dphi)`` as the phi-gradient of ``<v, grad_theta f>``."""
    _check_dim(v, params.total_dim, "mixed_hvp")
    return CurvatureGraph(f_builder, params, hyper).mixed(v)
