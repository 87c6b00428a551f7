"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays. Every op produces a fresh tensor that remembers its
parents and a backward rule; ``backward`` walks the graph in reverse
topological order and accumulates gradients additively on leaf tensors.
Tensors are treated as immutable once produced by an op, apart from gradient
accumulation.

Two float widths are supported: float32 (training default) and float64 for
finite-difference verification, switched with the ``precision`` context.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True


def default_dtype() -> np.dtype:
    """Current default float dtype for newly created tensors."""
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def _grad_enabled_as(flag: bool):
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def no_grad():
    """Context manager that disables graph recording."""
    return _grad_enabled_as(False)


class _Ctx:
    __slots__ = ("parents", "bwd")

    def __init__(self, parents, bwd):
        self.parents = parents
        self.bwd = bwd


class Tensor:
    """A numpy array plus an optional gradient slot and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[Tensor] = None
        self.requires_grad = requires_grad
        self._ctx: Optional[_Ctx] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Leaf tensor sharing this tensor's data, cut from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if flag and self._ctx is not None:
            raise ContractError("only leaf tensors can toggle requires_grad")
        self.requires_grad = flag
        return self

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic operators are installed by ops.py at import time.


def result_tensor(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    """Wrap an op result, attaching the graph node when recording is on."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = _Ctx(tuple(parents), bwd)
    return out


def first_order_only(op_name: str) -> None:
    """Guard for backward rules written in raw numpy.

    Such rules produce constants, so running them while recording is on would
    silently break double backprop. Ops on the gradient-penalty path implement
    graph-building backward rules instead.
    """
    if _GRAD_ENABLED:
        raise NotImplementedError(f"{op_name} does not support double backprop")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t._ctx is not None:
            for p in t._ctx.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return order


def _accumulate(old: Optional[Tensor], new: Tensor) -> Tensor:
    if old is None:
        return new
    if _GRAD_ENABLED:
        from . import ops

        return ops.add(old, new)
    return Tensor(old.data + new.data)


def _backprop(root: Tensor, create_graph: bool, want: Optional[set], accumulate_leaves: bool):
    seed = Tensor(np.ones_like(root.data))
    grads: dict[int, Tensor] = {id(root): seed}
    order = _topo_order(root)
    results: dict[int, Tensor] = {}
    with _grad_enabled_as(create_graph):
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if want is not None and id(t) in want:
                results[id(t)] = g
            if t._ctx is None:
                if accumulate_leaves and t.requires_grad:
                    t.grad = _accumulate(t.grad, g)
                continue
            parent_grads = t._ctx.bwd(g)
            for p, pg in zip(t._ctx.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                grads[id(p)] = _accumulate(grads.get(id(p)), pg)
    return results


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Repeated calls add up; zero grads explicitly between steps.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    _backprop(loss, create_graph, want=None, accumulate_leaves=True)


def grad_of(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Optional[Tensor]]:
    """Gradients of a scalar output w.r.t. selected tensors, without touching ``grad`` slots.

    With ``create_graph=True`` the returned gradients carry their own graph, so
    they can be differentiated again (used by the gradient penalty).
    """
    if output.data.size != 1:
        raise ContractError("grad_of requires a scalar output")
    want = {id(t) for t in wrt}
    results = _backprop(output, create_graph, want=want, accumulate_leaves=False)
    return [results.get(id(t)) for t in wrt]
