"""Dynamic gradient tape with grad-of-grad support.

Every differentiable primitive records a node on a :class:`Tape`.  Backward
rules are themselves written with tensor operations, so running
:func:`grad` with ``create_graph=True`` appends the backward computation to
the same tape and the returned gradients can be differentiated again.  That
is all Hessian-vector products need.

Nodes keep input *ids* and raw arrays rather than tensor objects, so a tape
never participates in a reference cycle and is freed as soon as the last
tensor pointing to it goes away.
"""
from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from typing import Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "TapeError",
    "ShapeError",
    "GradError",
    "as_tensor",
    "grad",
    "no_record",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "live_nodes",
    "NodeMonitor",
]


class TapeError(RuntimeError):
    """Tensors from different tapes mixed, or a released tape reused."""


class ShapeError(ValueError):
    """A primitive received operands of incompatible shapes."""


class GradError(RuntimeError):
    """Invalid request to :func:`grad`."""


_default_dtype = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


_local = threading.local()


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def no_record():
    """Evaluate operations without appending anything to any tape."""
    prev = _recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


@contextmanager
def _record_mode(flag: bool):
    prev = _recording()
    _local.recording = flag
    try:
        yield
    finally:
        _local.recording = prev


# Process-wide bookkeeping of live tape nodes.  Used only for diagnostics.
class _Counter:
    live = 0
    monitors: list = []


def _on_node():
    _Counter.live += 1
    for m in _Counter.monitors:
        if _Counter.live - m._base > m.peak:
            m.peak = _Counter.live - m._base


def _on_tape_dead(count):
    _Counter.live -= count[0]


def live_nodes() -> int:
    """Number of nodes held by all tapes that are still alive."""
    return _Counter.live


class NodeMonitor:
    """Track the peak number of live tape nodes created inside a block.

    >>> with NodeMonitor() as mon:
    ...     pass
    >>> mon.peak
    0
    """

    def __init__(self):
        self.peak = 0
        self._base = 0

    def __enter__(self):
        self._base = _Counter.live
        self.peak = 0
        _Counter.monitors.append(self)
        return self

    def __exit__(self, *exc):
        _Counter.monitors.remove(self)
        return False


class _Node:
    __slots__ = ("op", "inputs", "in_data", "out_data", "attrs")

    def __init__(self, op, inputs, in_data, out_data, attrs):
        self.op = op
        self.inputs = inputs
        self.in_data = in_data
        self.out_data = out_data
        self.attrs = attrs


class _Leaf:
    name = "leaf"


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.released = False
        self._count = [0]
        weakref.finalize(self, _on_tape_dead, self._count)

    def __len__(self):
        return len(self.nodes)

    @property
    def retain_graph_flag(self) -> bool:
        return not self.released

    def _append(self, node: _Node) -> int:
        if self.released:
            raise TapeError("tape was released by a backward pass with retain=False")
        self.nodes.append(node)
        self._count[0] += 1
        _on_node()
        return len(self.nodes) - 1

    def variable(self, data) -> "Tensor":
        """Register ``data`` as a differentiable leaf on this tape."""
        arr = _to_array(data)
        node_id = self._append(_Node(_Leaf, (), (), arr, {}))
        return Tensor(arr, self, node_id)

    def release(self):
        for node in self.nodes:
            node.in_data = ()
            node.out_data = None
        self.released = True


def _to_array(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype.kind in "biuf" and arr.dtype != _default_dtype:
        arr = arr.astype(_default_dtype)
    return arr


class Tensor:
    """Array value plus an optional link into a :class:`Tape`."""

    __slots__ = ("data", "tape", "node", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = data if isinstance(data, np.ndarray) else _to_array(data)
        self.tape = tape
        self.node = node

    # -- introspection -------------------------------------------------
    @property
    def tape_ref(self):
        return self.node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_constant(self) -> bool:
        return self.tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        link = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor({self.data!r}, {link})"

    def __len__(self):
        return len(self.data)

    # -- operators (implemented in ops) -------------------------------
    def __add__(self, o):
        return _ops().add(self, o)

    def __radd__(self, o):
        return _ops().add(o, self)

    def __sub__(self, o):
        return _ops().sub(self, o)

    def __rsub__(self, o):
        return _ops().sub(o, self)

    def __mul__(self, o):
        return _ops().mul(self, o)

    def __rmul__(self, o):
        return _ops().mul(o, self)

    def __truediv__(self, o):
        return _ops().div(self, o)

    def __rtruediv__(self, o):
        return _ops().div(o, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, k):
        return _ops().power(self, k)

    def __matmul__(self, o):
        return _ops().matmul(self, o)

    def __rmatmul__(self, o):
        return _ops().matmul(o, self)

    def __getitem__(self, key):
        return _ops().getitem(self, key)

    @property
    def T(self):
        return _ops().swap_last(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=-1, keepdims=False):
        return _ops().max(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return _ops().exp(self)

    def log(self):
        return _ops().log(self)

    def sigmoid(self):
        return _ops().sigmoid(self)

    def relu(self):
        return _ops().relu(self)

    def tanh(self):
        return _ops().tanh(self)


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_to_array(x))


def apply(op, *inputs, **attrs) -> Tensor:
    """Run ``op.forward`` and record a node when any input is tape-linked."""
    tensors = [as_tensor(t) for t in inputs]
    arrays = tuple(t.data for t in tensors)
    try:
        out = op.forward(*arrays, **attrs)
    except ValueError as exc:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(f"{op.name}: incompatible operand shapes ({shapes}): {exc}") from exc
    if not _recording():
        return Tensor(out)
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError(f"{op.name}: operands live on different tapes")
    if tape is None:
        return Tensor(out)
    ids = tuple(t.node if t.tape is not None else None for t in tensors)
    node_id = tape._append(_Node(op, ids, arrays, out, attrs))
    return Tensor(out, tape, node_id)


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    retain: bool = False,
    create_graph: bool | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Parameters
    ----------
    output : Tensor
        Scalar (size-1) tensor on a tape.
    wrt : sequence of Tensor
        Tensors on the same tape.  Tensors the output does not depend on get
        a zero gradient.
    retain : bool
        Keep the tape usable after this call.  Unless ``create_graph`` says
        otherwise, also record the backward pass so the returned gradients
        are tape-linked and differentiable.
    create_graph : bool, optional
        Record the backward pass.  Defaults to ``retain``.
    """
    if create_graph is None:
        create_graph = retain
    if create_graph and not retain:
        raise GradError("create_graph=True requires retain=True")
    if output.size != 1:
        raise GradError(f"output must be a scalar, got shape {output.shape}")
    tape = output.tape
    if tape is None:
        raise GradError("output is not on a tape (it does not depend on any variable)")
    if tape.released:
        raise TapeError("tape was released by an earlier backward pass; use retain=True")
    for w in wrt:
        if w.tape is not tape:
            raise GradError("every tensor in wrt must be on the output's tape")

    nodes = tape.nodes
    hi = output.node
    wrt_ids = {w.node for w in wrt}
    lo = min(wrt_ids) if wrt_ids else hi + 1

    relevant = np.zeros(hi + 1, dtype=bool)
    for i in wrt_ids:
        if i <= hi:
            relevant[i] = True
    for i in range(lo, hi + 1):
        if relevant[i]:
            continue
        for j in nodes[i].inputs:
            if j is not None and relevant[j]:
                relevant[i] = True
                break

    grads: dict[int, Tensor] = {}
    if lo <= hi and relevant[hi]:
        grads[hi] = Tensor(np.ones_like(output.data))
    with _record_mode(create_graph):
        for i in range(hi, lo - 1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = nodes[i]
            if not node.inputs:
                continue
            needs = tuple(j is not None and bool(relevant[j]) for j in node.inputs)
            if not any(needs):
                continue
            if i not in wrt_ids:
                del grads[i]
            ins = [
                Tensor(d, tape if j is not None else None, j)
                for d, j in zip(node.in_data, node.inputs)
            ]
            out = Tensor(node.out_data, tape, i)
            in_grads = node.op.backward(g, ins, out, needs, **node.attrs)
            for j, need, gj in zip(node.inputs, needs, in_grads):
                if not need or gj is None:
                    continue
                prev = grads.get(j)
                grads[j] = gj if prev is None else prev + gj

    result = []
    for w in wrt:
        gw = grads.get(w.node)
        if gw is None:
            gw = Tensor(np.zeros_like(w.data))
        elif not create_graph:
            gw = Tensor(gw.data)
        result.append(gw)
    if not retain:
        tape.release()
    return result
