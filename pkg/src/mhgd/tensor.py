"""Dense tensors with a per-step reverse-mode tape.

Every differentiable op records its parents and a backward closure on the
output tensor. ``backprop`` walks the resulting DAG in reverse topological
order and writes gradients into the ``grad`` slot of every reached leaf.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericalError(FloatingPointError):
    """Non-finite values or domain violations detected in checked mode."""


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return _get("grad_enabled", True)


def checked_mode() -> bool:
    return _get("checked", False)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


@contextlib.contextmanager
def checked():
    """Enable NaN/Inf detection and domain checks for ops run inside."""
    old = checked_mode()
    _state.checked = True
    try:
        yield
    finally:
        _state.checked = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = default_dtype()
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name
        if checked_mode() and not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in tensor {name or ''} of shape {self.shape}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the implementations live in mhgd.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]],
                name: Optional[str] = None) -> Tensor:
    """Wrap an op output, recording it on the tape when any parent needs grad."""
    out = Tensor(data, dtype=data.dtype, name=name)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backprop(root: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> Optional[list]:
    """Reverse-mode accumulation from a scalar ``root``.

    Gradients are written to ``leaf.grad`` for every reached leaf (replacing
    any previous value). If ``leaves`` is given, leaves that are not on any
    path to the root receive zero gradients and the list of gradients is
    returned in the same order.
    """
    if root.data.size != 1:
        raise ContractError(f"backprop needs a scalar root, got shape {root.shape}")
    for leaf in leaves or ():
        leaf.grad = None
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(f"gradient shape {pg.shape} does not match {parent.shape}")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        if checked_mode() and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient flowing through {node.name or node}")
    if leaves is None:
        return None
    out = []
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        out.append(leaf.grad)
    return out
