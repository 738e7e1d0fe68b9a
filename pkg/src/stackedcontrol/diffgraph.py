"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive applied to :class:`Var` objects that
live on it.  Calling :meth:`Tape.backward` on a scalar node walks the records
in reverse creation order and returns the gradient for every leaf.

Every public primitive also accepts plain numpy arrays.  When none of the
inputs is a ``Var`` the primitive just computes its forward value, so model
code written against this module runs unchanged with or without a tape.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when input shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive receives or produces NaN/Inf."""


# tag -> (forward, backward).  forward(*values, **attrs) -> (out, ctx);
# backward(ctx, grad_out) -> tuple of input grads (None where not needed).
RULES: Dict[str, tuple] = {}


def register(tag: str):
    def deco(cls):
        RULES[tag] = (cls.forward, cls.backward)
        return cls
    return deco


class Var:
    __slots__ = ("tape", "id", "value", "requires_grad")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)


class Tape:
    """Append-only record of primitive applications.

    ``grad=False`` gives a tape that evaluates but never records backward
    rules, which is what evaluation rollouts use.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self._backward: List[Optional[Callable]] = []
        self._inputs: List[tuple] = []
        self._leaves: List[int] = []
        self._leaf_shapes: Dict[int, tuple] = {}

    def __len__(self):
        return len(self._backward)

    def _new(self, value, requires_grad, backward=None, inputs=()):
        node_id = len(self._backward)
        self._backward.append(backward)
        self._inputs.append(inputs)
        return Var(self, node_id, value, requires_grad)

    def leaf(self, value, trainable: bool = True) -> Var:
        value = _as_array(value)
        _check_finite("leaf", value)
        var = self._new(value, trainable and self.grad)
        if var.requires_grad:
            self._leaves.append(var.id)
            self._leaf_shapes[var.id] = value.shape
        return var

    def const(self, value) -> Var:
        value = _as_array(value)
        _check_finite("const", value)
        return self._new(value, False)

    @property
    def leaf_ids(self) -> List[int]:
        return list(self._leaves)

    def backward(self, out: Var) -> Dict[int, np.ndarray]:
        """Gradients of scalar ``out`` with respect to every trainable leaf."""
        if out.tape is not self:
            raise ValueError("output Var belongs to a different tape")
        if out.value.size != 1:
            raise ShapeError(f"backward: output must be a scalar, got shape {out.value.shape}")
        grads: Dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
        for node_id in range(out.id, -1, -1):
            g = grads.get(node_id)
            rule = self._backward[node_id]
            if g is None or rule is None:
                continue
            in_grads = rule(g)
            for (in_id, needs), gi in zip(self._inputs[node_id], in_grads):
                if not needs or gi is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + gi
                else:
                    grads[in_id] = gi
            if node_id not in self._leaf_shapes:
                del grads[node_id]
        return {i: grads.get(i, np.zeros(self._leaf_shapes[i])) for i in self._leaves}


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def _check_finite(tag, value):
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{tag}: non-finite value encountered")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def primitive(tag: str, *inputs, **attrs):
    """Apply primitive ``tag`` to ``inputs``; record it if any input is a Var.

    Returns a ``Var`` when at least one input is a ``Var`` and a plain
    ``ndarray`` otherwise.
    """
    try:
        forward, backward = RULES[tag]
    except KeyError:
        raise KeyError(f"unknown primitive {tag!r}") from None
    tape = next((x.tape for x in inputs if isinstance(x, Var)), None)
    values = [x.value if isinstance(x, Var) else _as_array(x) for x in inputs]
    out, ctx = forward(*values, **attrs)
    _check_finite(tag, out)
    if tape is None:
        return out
    for x in inputs:
        if isinstance(x, Var) and x.tape is not tape:
            raise ValueError(f"{tag}: inputs live on different tapes")
    needs = tuple(isinstance(x, Var) and x.requires_grad for x in inputs)
    if not (tape.grad and any(needs)):
        return tape._new(out, False)
    ids = tuple((x.id if isinstance(x, Var) else -1, n) for x, n in zip(inputs, needs))
    # Look the rule up at backward time so a patched rule takes effect.
    rule = lambda g, _ctx=ctx, _tag=tag: RULES[_tag][1](_ctx, g)
    return tape._new(out, True, rule, ids)


def _shapes(*arrays):
    return ", ".join(str(a.shape) for a in arrays)


def _broadcast_check(tag, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: shapes do not broadcast: {_shapes(a, b)}") from None


@register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        _broadcast_check("add", a, b)
        return a + b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@register("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        _broadcast_check("sub", a, b)
        return a - b, (a.shape, b.shape)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        _broadcast_check("mul", a, b)
        return a * b, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register("square")
class _Square:
    @staticmethod
    def forward(a):
        return a * a, a

    @staticmethod
    def backward(a, g):
        return (2.0 * a * g,)


@register("relu")
class _Relu:
    @staticmethod
    def forward(a):
        mask = a > 0
        return np.where(mask, a, 0.0), mask

    @staticmethod
    def backward(mask, g):
        # derivative at the kink is 0
        return (g * mask,)


@register("min0")
class _Min0:
    @staticmethod
    def forward(a):
        mask = a < 0
        return np.where(mask, a, 0.0), mask

    @staticmethod
    def backward(mask, g):
        return (g * mask,)


@register("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        if a.ndim < 1 or b.ndim < 1:
            raise ShapeError(f"matmul: scalar operand, shapes {_shapes(a, b)}")
        try:
            out = np.matmul(a, b)
        except ValueError:
            raise ShapeError(f"matmul: shapes do not conform: {_shapes(a, b)}") from None
        return out, (a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        if a.ndim == 1:
            g = np.expand_dims(g, -2)
        if b.ndim == 1:
            g = np.expand_dims(g, -1)
        ga = np.matmul(g, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g)
        ga = _unbroadcast(ga, a2.shape)
        gb = _unbroadcast(gb, b2.shape)
        return ga.reshape(a.shape), gb.reshape(b.shape)


@register("affine")
class _Affine:
    """y = x W^T + b for x of shape (..., in), W (out, in), b (out,)."""

    @staticmethod
    def forward(x, W, b):
        if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1:] != (W.shape[1],):
            raise ShapeError(f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
        return x @ W.T + b, (x, W)

    @staticmethod
    def backward(ctx, g):
        x, W = ctx
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.reshape(-1, W.shape[1])
        return g @ W, g2.T @ x2, g2.sum(axis=0)


@register("concat")
class _Concat:
    @staticmethod
    def forward(*arrays, axis=-1):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: shapes do not conform: {_shapes(*arrays)}") from None
        sizes = [a.shape[axis] for a in arrays]
        return out, (np.cumsum(sizes)[:-1], axis)

    @staticmethod
    def backward(ctx, g):
        splits, axis = ctx
        return tuple(np.split(g, splits, axis=axis))


@register("sum")
class _Sum:
    @staticmethod
    def forward(a, axis=None):
        return np.sum(a, axis=axis), (a.shape, axis)

    @staticmethod
    def backward(ctx, g):
        shape, axis = ctx
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


@register("mean")
class _Mean:
    @staticmethod
    def forward(a, axis=0):
        if a.size == 0:
            raise ShapeError("mean: empty input")
        count = a.size if axis is None else a.shape[axis]
        return np.mean(a, axis=axis), (a.shape, axis, count)

    @staticmethod
    def backward(ctx, g):
        shape, axis, count = ctx
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)


@register("diag")
class _Diag:
    """(..., n) -> (..., n, n) with the input on the diagonal."""

    @staticmethod
    def forward(a):
        if a.ndim < 1:
            raise ShapeError(f"diag: needs at least 1-D input, got {a.shape}")
        n = a.shape[-1]
        return a[..., :, None] * np.eye(n), None

    @staticmethod
    def backward(ctx, g):
        return (np.diagonal(g, axis1=-2, axis2=-1).copy(),)


@register("take")
class _Take:
    @staticmethod
    def forward(a, key=None):
        try:
            out = a[key]
        except IndexError as exc:
            raise ShapeError(f"take: bad index {key!r} for shape {a.shape}: {exc}") from None
        return np.array(out, dtype=np.float64), (a.shape, key)

    @staticmethod
    def backward(ctx, g):
        shape, key = ctx
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape=None):
        try:
            return a.reshape(shape), a.shape
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    @staticmethod
    def backward(shape, g):
        return (g.reshape(shape),)


@register("batchnorm")
class _BatchNorm:
    """Per-feature normalization over axis 0 using the batch statistics."""

    @staticmethod
    def forward(x, gamma, beta, eps=1e-5):
        if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
        if x.shape[0] < 2:
            raise ShapeError(f"batchnorm: batch statistics need at least 2 rows, got {x.shape}")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv_std
        return gamma * xhat + beta, (xhat, inv_std, gamma)

    @staticmethod
    def backward(ctx, g):
        xhat, inv_std, gamma = ctx
        n = g.shape[0]
        dxhat = g * gamma
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def add(a, b):
    return primitive("add", a, b)


def sub(a, b):
    return primitive("sub", a, b)


def mul(a, b):
    return primitive("mul", a, b)


def square(a):
    return primitive("square", a)


def relu(a):
    return primitive("relu", a)


max0 = relu


def min0(a):
    """Elementwise min{0, x}."""
    return primitive("min0", a)


def matmul(a, b):
    return primitive("matmul", a, b)


def affine(x, W, b):
    return primitive("affine", x, W, b)


def concat(arrays: Sequence, axis: int = -1):
    return primitive("concat", *arrays, axis=axis)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    return primitive("sum", a, axis=axis)


def mean(a, axis=0):
    return primitive("mean", a, axis=axis)


def diag(a):
    return primitive("diag", a)


def take(a, key):
    return primitive("take", a, key=key)


def reshape(a, shape):
    return primitive("reshape", a, shape=tuple(shape))


def batchnorm(x, gamma, beta, eps=1e-5):
    return primitive("batchnorm", x, gamma, beta, eps=eps)


def value(x) -> np.ndarray:
    """The numeric value of a Var or array."""
    return x.value if isinstance(x, Var) else _as_array(x)


def finite_difference_gradient(fn: Callable[[np.ndarray], float], point, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` at ``point``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
