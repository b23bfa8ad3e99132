"""A small reverse-mode differentiation engine over dense float64 arrays.

A :class:`Value` wraps an ``ndarray`` together with the rule that produced
it. Calling :meth:`Value.backward` on a scalar walks the graph once in reverse
topological order and accumulates gradients into every leaf that has
``requires_grad`` set. Only the primitives the network and the losses need
are provided.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class Value:
    __slots__ = ("data", "grad", "requires_grad", "parents", "grad_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Value(shape={self.shape}, op={self.op or 'leaf'})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad_fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Value):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)


class Parameter(Value):
    """A named trainable leaf with its Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v")

    def __init__(self, name, data):
        super().__init__(np.array(data, dtype=np.float64, order="C"), requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological(root):
    order, seen = [], {id(root)}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent.parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def const(x):
    return x if isinstance(x, Value) else Value(x)


def _node(data, parents, grad_fn, op):
    req = any(p.requires_grad for p in parents)
    return Value(data, requires_grad=req, parents=parents if req else (), grad_fn=grad_fn if req else None, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = const(a), const(b)
    _broadcast_shape("add", a, b)
    return _node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b):
    a, b = const(a), const(b)
    _broadcast_shape("sub", a, b)
    return _node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub",
    )


def mul(a, b):
    a, b = const(a), const(b)
    _broadcast_shape("mul", a, b)
    return _node(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = const(a), const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(out, (a, b), grad_fn, "matmul")


def concat(values, axis=-1):
    values = [const(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in values]}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in values])[:-1]
    return _node(out, tuple(values), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def gather(x, index):
    """Rows of ``x`` picked by an integer index array of any shape."""
    x = const(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 1:
        raise ShapeError(f"gather: cannot index a scalar of shape {x.shape}")
    if index.size and (index.min() < -x.shape[0] or index.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for shape {x.shape}")

    def grad_fn(g):
        out = np.zeros_like(x.data)
        flat = g.reshape((index.size,) + x.shape[1:])
        np.add.at(out, index.reshape(-1), flat)
        return (out,)

    return _node(x.data[index], (x,), grad_fn, "gather")


def reduce_max(x, axis):
    """Maximum along one axis; the gradient goes to the first maximal slot."""
    x = const(x)
    ax = axis % x.ndim
    arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, arg, axis=ax).squeeze(ax)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _node(out, (x,), grad_fn, "reduce_max")


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None):
    x = const(x)
    axes = _axes(axis, x.ndim)
    out = x.data.sum(axis=axes)
    return _node(
        out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),), "reduce_sum"
    )


def reduce_mean(x, axis=None):
    x = const(x)
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)
    return _node(
        out, (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axes) / count, x.shape).copy(),), "reduce_mean",
    )


def relu(x):
    x = const(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softmax(x, axis=-1):
    x = const(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _node(
        s, (x,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),), "softmax"
    )


def square(x):
    x = const(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def sqrt(x):
    """Square root; the derivative at exactly zero is taken as zero."""
    x = const(x)
    out = np.sqrt(x.data)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _node(out, (x,), grad_fn, "sqrt")


def reciprocal(x):
    x = const(x)
    out = 1.0 / x.data
    return _node(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def absolute(x):
    x = const(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "absolute")


def transpose(x):
    """Swap the last two axes (plain transpose for 2-D input)."""
    x = const(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got shape {x.shape}")
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x, shape):
    x = const(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def tile(x, reps, axis):
    """Repeat the whole array ``reps`` times along ``axis``."""
    x = const(x)
    ax = axis % x.ndim
    mult = [1] * x.ndim
    mult[ax] = reps
    out = np.tile(x.data, mult)

    def grad_fn(g):
        shp = g.shape[:ax] + (reps, x.shape[ax]) + g.shape[ax + 1:]
        return (g.reshape(shp).sum(axis=ax),)

    return _node(out, (x,), grad_fn, "tile")


@dataclass
class GradCheckResult:
    max_error: float
    probed: int
    skipped: int
    worst_slot: str = ""


def grad_check(f, params, eps=1e-5, max_slots=None, rng=None):
    """Largest relative error between analytic and central-difference gradients."""
    return grad_check_detail(f, params, eps, max_slots, rng).max_error


def grad_check_detail(f, params, eps=1e-5, max_slots=None, rng=None, kink_tol=None):
    """Compare analytic gradients of a scalar ``f()`` against central differences.

    ``params`` are leaf Values whose data is perturbed in place. With
    ``max_slots`` set, at most that many randomly chosen slots per parameter
    are probed. Relative errors use ``max(1, |analytic|, |numeric|)`` as
    denominator.

    With ``kink_tol`` set, each slot is also differenced at ``eps / 2``. When
    the two quotients disagree by more than ``kink_tol`` (relative), a ReLU or
    max kink, or a jump in a discrete selection, lies within ``eps`` of the
    current value; such slots are counted as skipped instead of compared.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps={eps} outside [1e-5, 1e-2]")
    for p in params:
        p.grad = None
    root = f()
    again = f()
    if not np.array_equal(root.data, again.data):
        raise DeterminismError("f gave different values on two identical forward passes")
    root.backward()
    rng = np.random.default_rng(0) if rng is None else rng

    def quotient(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        return (fp - fm) / (2.0 * h)

    result = GradCheckResult(0.0, 0, 0)
    for k, p in enumerate(params):
        name = getattr(p, "name", f"param{k}")
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        slots = np.arange(flat.size)
        if max_slots is not None and flat.size > max_slots:
            slots = np.sort(rng.choice(flat.size, size=max_slots, replace=False))
        for i in slots:
            result.probed += 1
            numeric = quotient(flat, i, eps)
            if kink_tol is not None:
                half = quotient(flat, i, eps / 2)
                if abs(numeric - half) > kink_tol * max(1.0, abs(numeric), abs(half)):
                    result.skipped += 1
                    continue
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > result.max_error:
                result.max_error = float(err)
                result.worst_slot = f"{name}[{i}]"
    return result
