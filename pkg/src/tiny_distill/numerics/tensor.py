"""Dense tensors with a reverse-mode tape.

Every differentiable op creates a :class:`Node` holding its inputs and a
closure mapping the output gradient to input gradients. ``backward`` sorts
the nodes reachable from a scalar loss, walks them in reverse topological
order, and then releases the graph so it cannot be replayed.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import NonFiniteError, ShapeError, UsageError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


def check_finite(arr: np.ndarray, where: str) -> None:
    # a single reduction catches NaN/Inf; the full scan only runs on suspicion
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {where}")


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Row-major float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOATS:
            arr = arr.astype(np.float32)
        if arr.dtype not in _FLOATS:
            raise ShapeError(f"unsupported dtype {arr.dtype}")
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"all dimensions must be positive, got {arr.shape}")
        check_finite(arr, "Tensor()")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, node=None):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = node is not None
        t._node = node
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar; implementations live in ops
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
        if isinstance(other, Tensor):
            raise UsageError("tensor / tensor is not supported; divide by a scalar")
        return ops.scale(self, 1.0 / other)

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

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def make_result(data: np.ndarray, inputs, backward_fn, op: str) -> Tensor:
    """Wrap an op output, recording a node when any input needs gradients."""
    check_finite(data, op)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        for t in inputs:
            if t._node is not None and t._node.consumed:
                raise UsageError(f"{op}: input belongs to a graph that was already backpropagated")
        return Tensor._wrap(data, Node(op, tuple(inputs), backward_fn))
    return Tensor._wrap(data)


class ComputeGraph:
    """Topologically ordered record of the nodes that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.order = self._toposort(root)

    @staticmethod
    def _toposort(root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node.consumed:
                raise UsageError("graph was already backpropagated; run a new forward pass")
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return order

    @property
    def nodes(self):
        return [t._node for t in self.order]

    def backward(self):
        root = self.root
        if root.data.shape != ():
            raise UsageError(f"backward needs a scalar loss, got shape {root.shape}")
        if root._node is None:
            if root.requires_grad:
                root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1
                return
            raise UsageError("loss does not depend on any tensor that requires grad")
        if root._node.consumed:
            raise UsageError("graph was already backpropagated; run a new forward pass")
        grads = {id(root): np.ones_like(root.data)}
        for t in reversed(self.order):
            node = t._node
            g = grads.pop(id(t), None)
            if g is not None:
                in_grads = node.backward_fn(g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    if inp._node is None:
                        inp.grad = ig.astype(inp.dtype, copy=False) if inp.grad is None else inp.grad + ig
                    else:
                        key = id(inp)
                        prev = grads.get(key)
                        grads[key] = ig if prev is None else prev + ig
            node.consumed = True
            node.backward_fn = None
            node.inputs = ()


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> ComputeGraph:
    """Populate ``.grad`` on every leaf tensor that requires grad."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.shape != ():
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else ComputeGraph(loss)
    if graph.root is not loss:
        raise UsageError("graph was built for a different loss")
    graph.backward()
    return graph
