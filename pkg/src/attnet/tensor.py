"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation
creates a new tensor that remembers its parents and a closure mapping the
output gradient to one gradient per parent.  :class:`Graph` orders those
records topologically and runs the backward pass.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .exceptions import ConfigError, ContractError

_state = threading.local()
_PRECISIONS = {"float64": np.float64, "float32": np.float32}


def get_dtype():
    return getattr(_state, "dtype", np.float64)


def set_precision(name):
    """Set the working precision (``"float64"`` or ``"float32"``) for new tensors."""
    try:
        _state.dtype = _PRECISIONS[str(name)]
    except KeyError:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}") from None


@contextlib.contextmanager
def precision(name):
    previous = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state.dtype = previous


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for inference."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def as_array(value, dtype=None):
    dtype = dtype or get_dtype()
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional array with an optional gradient."""

    def __init__(self, data, requires_grad=False, *, dtype=None):
        self.data = as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = ""

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

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

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        Graph(self).backward(grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'!r}{flag})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _lift(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-_lift(other, self.dtype))

    def __rsub__(self, other):
        return _lift(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward, "div")

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward, "getitem")

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum"
        )

    def mean(self, axis=None, keepdims=False):
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape"
        )

    def swap_last(self):
        """Transpose the last two axes."""
        return Tensor._from_op(
            np.swapaxes(self.data, -1, -2), (self,), lambda g: (np.swapaxes(g, -1, -2),), "transpose"
        )

    @property
    def T(self):
        return self.swap_last()

    def clamp_min(self, low):
        mask = self.data > low
        out = np.where(mask, self.data, np.asarray(low, dtype=self.dtype))
        return Tensor._from_op(out, (self,), lambda g: (g * mask,), "clamp_min")


def _lift(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(
        np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack"
    )


class Parameter(Tensor):
    """Trainable tensor with a unique name and Adam moment buffers."""

    def __init__(self, data, name, *, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def reset_moments(self):
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Graph:
    """Topologically ordered record of the operations leading to ``output``."""

    def __init__(self, output):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root):
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None):
        """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        out = self.output
        if not out.requires_grad:
            raise ContractError(f"backward() on {out!r}, which does not require grad")
        if grad is None:
            if out.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(out.data)
        grads = {id(out): as_array(grad, out.dtype).reshape(out.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
