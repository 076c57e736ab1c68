"""Tensor type and the reverse-mode graph.

A ``Tensor`` wraps a numpy array. Every differentiable op records a ``Node``
holding its inputs and a closure that maps the output gradient to input
gradients. ``backward`` walks the recorded nodes in reverse creation order
and releases them, so a graph can be differentiated exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (stale graph, non-scalar loss)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn", "released")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.released = False

    def release(self) -> None:
        self.released = True
        self.backward_fn = None
        self.inputs = ()


class Tensor:
    """Dense row-major array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording a node when any input tracks grad."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


def _collect(root: Tensor) -> list:
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(t) in seen:
            continue
        if node.released:
            raise GraphError("backward through a released graph; run the forward pass again")
        seen[id(t)] = t
        stack.extend(node.inputs)
    return sorted(seen.values(), key=lambda t: t._node.id, reverse=True)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracking leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    order = _collect(loss)
    pending = {id(loss): seed}
    for t in order:
        g = pending.pop(id(t), None)
        node = t._node
        if g is not None:
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi
        node.release()
