"""Tensor type and the reverse-mode gradient engine.

A :class:`Tensor` wraps a numpy array.  Operations that involve at least one
tensor with ``requires_grad`` record their parents and a closure mapping the
output gradient to one gradient per parent.  :func:`backward` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

from spkid.errors import GraphCycle, NotScalar

_state = {"dtype": np.float32, "debug": False}


def get_dtype():
    return _state["dtype"]


def set_dtype(dtype):
    """Set the storage dtype for newly created tensors (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _state["dtype"]
    set_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag: bool):
    """Enable NaN/Inf checks on every operator output."""
    _state["debug"] = bool(flag)


def is_debug() -> bool:
    return _state["debug"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        dtype = dtype or _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from spkid.numcore import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from spkid.numcore import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from spkid.numcore import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from spkid.numcore import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from spkid.numcore import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from spkid.numcore import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from spkid.numcore import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from spkid.numcore import ops
        return ops.div(other, self)

    def __neg__(self):
        from spkid.numcore import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from spkid.numcore import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from spkid.numcore import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from spkid.numcore import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from spkid.numcore import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from spkid.numcore import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from spkid.numcore import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(data, parents, backward_fn) -> Tensor:
    """Wrap an operator output, attaching graph info when any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by operator")
    return out


def _topological_order(root: Tensor):
    # iterative DFS; 1 = on stack, 2 = done
    state = {}
    order = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphCycle("operator graph contains a cycle")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise GraphCycle("operator graph contains a cycle")
            if pmark is None and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor in the graph."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
