"""Graph nodes, recording state and the reverse-mode sweep.

Every op output is a :class:`Tensor` that remembers its parents and a
backward rule.  Backward rules are written with the same differentiable ops
as the forward pass, so running :func:`backward` with ``create_graph=True``
records the gradient computation itself and it can be differentiated again.
"""

from __future__ import annotations

import contextlib
import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class _State:
    recording = True
    debug = False
    dtype = np.dtype(np.float32)


STATE = _State()


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


class GraphError(RuntimeError):
    """Raised when backward is asked for something the graph cannot give."""


def default_dtype() -> np.dtype:
    return STATE.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    """Temporarily change the dtype used for new tensors (``float32``/``float64``)."""
    old = STATE.dtype
    STATE.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        STATE.dtype = old


@contextlib.contextmanager
def grad_mode(enabled: bool) -> Iterable[None]:
    old = STATE.recording
    STATE.recording = enabled
    try:
        yield
    finally:
        STATE.recording = old


def no_grad():
    return grad_mode(False)


def is_recording() -> bool:
    return STATE.recording


def set_debug(enabled: bool) -> None:
    """Turn NaN/Inf checking on every op output on or off."""
    STATE.debug = enabled


class Tensor:
    """Dense array plus the graph bookkeeping needed for reverse mode."""

    __slots__ = ("data", "requires_grad", "kind", "parents", "ctx", "bwd", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(STATE.dtype)
        if STATE.debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.kind = "leaf"
        self.parents = ()
        self.ctx = None
        self.bwd = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(kind={self.kind}, shape={self.shape}{flag})"

    # Operator sugar lives in ops.py, which patches these in.
    def __len__(self) -> int:
        return self.data.shape[0]


BackwardFn = Callable[[Tensor, Tensor, Sequence[bool]], Sequence["Tensor | None"]]


def make_node(data: np.ndarray, kind: str, parents: tuple[Tensor, ...], bwd: BackwardFn, ctx=None) -> Tensor:
    """Wrap an eagerly computed array as a graph node (or a constant)."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.id = next(_ids)
    out.kind = kind
    if STATE.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.ctx = ctx
        out.bwd = bwd
    else:
        out.requires_grad = False
        out.parents = ()
        out.ctx = None
        out.bwd = None
    if STATE.debug and not np.all(np.isfinite(data)):
        shapes = ", ".join(str(p.shape) for p in parents)
        raise NonFiniteError(f"{kind} produced non-finite values (input shapes {shapes})")
    return out


@dataclass
class Graph:
    """Nodes reachable from a tensor, parents before children."""

    nodes: list[Tensor]

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def inputs_of(self, node: Tensor) -> list[int]:
        return [p.id for p in node.parents]

    def __len__(self) -> int:
        return len(self.nodes)


def graph_of(root: Tensor) -> Graph:
    seen = {root.id: root}
    stack = [root]
    while stack:
        n = stack.pop()
        for p in n.parents:
            if p.id not in seen:
                seen[p.id] = p
                stack.append(p)
    return Graph([seen[i] for i in sorted(seen)])


def _accumulate(grads: dict, node_id: int, g: Tensor) -> None:
    prev = grads.get(node_id)
    if prev is None:
        grads[node_id] = g
    else:
        from .ops import add

        grads[node_id] = add(prev, g)


def backward(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Node ids grow with creation order, so anything created before the oldest
    ``wrt`` tensor cannot depend on it; the sweep never walks past that point.
    This keeps per-step inner-loop gradients from traversing earlier steps.

    With ``create_graph`` the returned gradients are graph nodes.  Tensors in
    ``wrt`` that ``loss`` does not depend on raise :class:`GraphError` unless
    ``allow_unused`` is set, in which case zeros are returned with a warning.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt)
    if not wrt:
        return []
    wrt_ids = {t.id for t in wrt}
    floor = min(wrt_ids)

    seen: dict[int, Tensor] = {loss.id: loss}
    if loss.requires_grad:
        stack = [loss]
        while stack:
            n = stack.pop()
            for p in n.parents:
                if p.requires_grad and p.id >= floor and p.id not in seen:
                    seen[p.id] = p
                    stack.append(p)
    order = sorted(seen)

    relevant: set[int] = set()
    for i in order:
        n = seen[i]
        if i in wrt_ids or any(p.id in relevant for p in n.parents):
            relevant.add(i)

    grads: dict[int, Tensor] = {}
    if loss.id in relevant:
        grads[loss.id] = Tensor(np.ones_like(loss.data))
        with grad_mode(create_graph):
            for i in reversed(order):
                n = seen[i]
                if not n.parents or i not in relevant:
                    continue
                g = grads.get(i) if i in wrt_ids else grads.pop(i, None)
                if g is None:
                    continue
                needs = tuple(p.id in relevant for p in n.parents)
                pgs = n.bwd(n, g, needs)
                for p, need, pg in zip(n.parents, needs, pgs):
                    if need and pg is not None:
                        _accumulate(grads, p.id, pg)

    out = []
    missing = []
    for t in wrt:
        g = grads.get(t.id)
        if g is None:
            missing.append(t)
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    if missing:
        msg = f"{len(missing)} of {len(wrt)} wrt tensors are unreachable from the loss: " + ", ".join(
            f"{t.kind}{t.shape}" for t in missing[:5]
        )
        if not allow_unused:
            raise GraphError(msg)
        warnings.warn(msg + " (returning zeros)", stacklevel=2)
    return out
