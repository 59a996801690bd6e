"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced.  Calling
``backward()`` on a scalar result replays the recorded graph in reverse
topological order and accumulates vector-Jacobian products into the leaf
tensors that were created with ``requires_grad=True``.

The primitive set is deliberately small: affine maps (matmul + add),
layer normalization, SiLU, softplus, exponentials, elementwise
arithmetic with broadcasting, reductions, concatenation/stacking/indexing,
cosine similarity, and stop-gradient.  Every layer in this package is a
composition of these.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces a NaN or infinity and checks are on."""


_grad_enabled = True
_finite_checks = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def finite_checks(enabled: bool = True):
    """Check every primitive output for non-finite entries inside the block."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _postcheck(data: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by primitive '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None, op="leaf"):
        keep = isinstance(data, (np.ndarray, np.generic))
        self.data = np.asarray(data, dtype=data.dtype if keep else np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._vjp = vjp
        self._op = op

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    # -- backward ------------------------------------------------------------
    def backward(self, grad_output=None):
        """Accumulate gradients of this tensor into all reachable leaves."""
        if grad_output is None:
            grad_output = np.ones_like(self.data)
        self.grad = np.asarray(grad_output, dtype=self.data.dtype)

        # Iterative topo sort: graphs from long recurrences exceed the
        # recursion limit, so no recursion here.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            # Interior grads are no longer needed; drop them to bound memory.
            if node is not self and node._parents:
                node.grad = None


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Wrap an array as a non-differentiable node, preserving dtype."""
    return Tensor(np.asarray(data), requires_grad=False)


def _coerce(x, like: np.ndarray) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(data, parents, vjp, op) -> Tensor:
    _postcheck(data, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), vjp=vjp, op=op)
    return Tensor(data, requires_grad=False, op=op)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a.data)
    out = a.data + b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(g, b.data.shape)

    return _node(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a.data)
    out = a.data - b.data

    def vjp(g):
        return _sum_to_shape(g, a.data.shape), _sum_to_shape(-g, b.data.shape)

    return _node(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a.data)
    out = a.data * b.data

    def vjp(g):
        return (_sum_to_shape(g * b.data, a.data.shape),
                _sum_to_shape(g * a.data, b.data.shape))

    return _node(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a.data)
    out = a.data / b.data

    def vjp(g):
        return (_sum_to_shape(g / b.data, a.data.shape),
                _sum_to_shape(-g * out / b.data, b.data.shape))

    return _node(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    out = -a.data

    def vjp(g):
        return (-g,)

    return _node(out, (a,), vjp, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; operands must be at least 2-D."""
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _sum_to_shape(ga, a.data.shape), _sum_to_shape(gb, b.data.shape)

    return _node(out, (a, b), vjp, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    out = np.transpose(a.data, ax)
    inv = np.argsort(ax)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), vjp, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _node(out, (a,), vjp, "reshape")


# -- nonlinearities -----------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _node(out, (a,), vjp, "sqrt")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * _sigmoid(a.data),)

    return _node(out, (a,), vjp, "softplus")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _node(out, (a,), vjp, "silu")


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy() if g.shape != a.data.shape else g,)

    return _node(out, (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def vjp(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy() if g.shape != a.data.shape else g,)

    return _node(out, (a,), vjp, "mean")


# -- structure ----------------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), vjp, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _node(out, tuple(tensors), vjp, "stack")


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _node(out, (a,), vjp, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along an axis by integer index (indices may repeat)."""
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _node(out, (a,), vjp, "take")


def where(cond, a, b) -> Tensor:
    """Select between two tensors with a constant boolean mask."""
    mask = np.asarray(cond, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.data.dtype))
    b = _coerce(b, a.data)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        zero = np.zeros((), dtype=g.dtype)
        return (_sum_to_shape(np.where(mask, g, zero), a.data.shape),
                _sum_to_shape(np.where(mask, zero, g), b.data.shape))

    return _node(out, (a, b), vjp, "where")


def stop_gradient(a: Tensor) -> Tensor:
    """Treat the argument as a constant: no gradient ever flows through."""
    return Tensor(a.data, requires_grad=False, op="stop_gradient")


# -- fused layers -------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        ggain = _sum_to_shape(g * xhat, gain.data.shape)
        gbias = _sum_to_shape(g, bias.data.shape)
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), vjp, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map with weight stored as [out, in] (row per output unit)."""
    y = matmul(x, transpose(weight))
    if bias is not None:
        y = add(y, bias)
    return y


def cosine_similarity(x: Tensor, y: Tensor) -> Tensor:
    """Cosine of the angle between rows (last axis); zero-norm rows give 0.

    The zero-norm convention carries zero gradient, so downstream losses of
    the form 1 - cos stay flat there instead of blowing up.
    """
    dot = (x.data * y.data).sum(axis=-1)
    nx = np.sqrt((x.data * x.data).sum(axis=-1))
    ny = np.sqrt((y.data * y.data).sum(axis=-1))
    denom = nx * ny
    ok = denom != 0.0
    safe = np.where(ok, denom, 1.0)
    out = np.where(ok, dot / safe, 0.0)

    def vjp(g):
        ge = np.where(ok, g, 0.0)[..., None]
        nx_s = np.where(ok, nx, 1.0)[..., None]
        ny_s = np.where(ok, ny, 1.0)[..., None]
        c = out[..., None]
        gx = ge * (y.data / (nx_s * ny_s) - c * x.data / (nx_s * nx_s))
        gy = ge * (x.data / (nx_s * ny_s) - c * y.data / (ny_s * ny_s))
        return _sum_to_shape(gx, x.data.shape), _sum_to_shape(gy, y.data.shape)

    return _node(out, (x, y), vjp, "cosine_similarity")


def discretized_input_gain(a: Tensor, delta: Tensor, b: Tensor) -> Tensor:
    """Input gain of the exact zero-order-hold discretization.

    Computes ``(exp(delta*a) - 1) / a * b`` elementwise with broadcasting,
    switching to the series ``delta*b*(1 + u/2 + u**2/6)``, ``u = delta*a``,
    when ``|u| < 1e-6`` where the closed form loses all precision.
    """
    u = delta.data * a.data
    small = np.abs(u) < 1e-6
    any_small = bool(small.any())
    a_safe = np.where(small, 1.0, a.data) if any_small else a.data
    eu = np.exp(u)
    gain = (eu - 1.0) / a_safe
    if any_small:
        gain_series = delta.data * (1.0 + u * (0.5 + u / 6.0))
        gain = np.where(small, gain_series, gain)
    out = gain * b.data

    def vjp(g):
        gb = _sum_to_shape(g * gain, b.data.shape)
        # d gain / d delta = exp(u) in the closed form; series matches to O(u^3).
        dg_ddelta = np.where(small, 1.0 + u * (1.0 + 0.5 * u), eu) if any_small else eu
        gdelta = _sum_to_shape(g * b.data * dg_ddelta, delta.data.shape)
        dg_da = (u * eu - eu + 1.0) / (a_safe * a_safe)
        if any_small:
            d2 = delta.data * delta.data
            dg_da = np.where(small, d2 * (0.5 + u / 3.0), dg_da)
        ga = _sum_to_shape(g * b.data * dg_da, a.data.shape)
        return ga, gdelta, gb

    return _node(out, (a, delta, b), vjp, "discretized_input_gain")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax composed from primitives; the max shift is detached."""
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    e = exp(sub(x, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    d = sub(a, b)
    return mean(mul(d, d))
