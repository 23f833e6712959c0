"""Dense numpy-backed tensors with reverse-mode differentiation.

Every op builds a node holding its inputs and a backward closure. Calling
:func:`backward` on a scalar orders the reachable graph into a tape
(topological order) and replays it in reverse, accumulating gradients.

Arrays may carry leading batch axes; ops act on the trailing one or two axes.
The only implicit broadcasting is the one a model needs: a parameter of shape
``(..., d)`` added to or multiplied into a batched activation, and a weight
matrix shared across the batch axes of a matmul.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-6

_GRAD_ENABLED = True
_FLOP_COUNTER: list[int] | None = None


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not (isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64)):
            dtype = DEFAULT_DTYPE  # python scalars and lists; float ndarrays keep their precision
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def count_matmul_flops():
    """Record 2 FLOPs per multiply-accumulate for every matmul executed inside.

    Yields a one-element list whose entry holds the running total.
    """
    global _FLOP_COUNTER
    prev = _FLOP_COUNTER
    _FLOP_COUNTER = [0]
    try:
        yield _FLOP_COUNTER
    finally:
        _FLOP_COUNTER = prev


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    _check_finite(out.data, op)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_trailing_broadcast(a, b, op):
    # Only allow b (or a) to be missing leading axes, or size-1 leading axes.
    sa, sb = a.shape, b.shape
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError as exc:
        raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}") from exc
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small and small[-1] != big[-1]:
        raise DimensionError(f"{op}: trailing axes differ: {sa} vs {sb}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(a, b)), as_tensor(b, _dt(a, b))
    _check_trailing_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(a, b)), as_tensor(b, _dt(a, b))
    _check_trailing_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, _dt(a, b)), as_tensor(b, _dt(a, b))
    if a.ndim and b.ndim:
        _check_trailing_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def _dt(a, b):
    for x in (a, b):
        if isinstance(x, Tensor):
            return x.dtype
    return DEFAULT_DTYPE


def gelu(x: Tensor, approximate: str = "tanh") -> Tensor:
    """GELU activation; ``approximate="tanh"`` (default) or ``"none"`` for the exact erf form."""
    xd = x.data
    if approximate == "tanh":
        c = math.sqrt(2.0 / math.pi)
        x2 = xd * xd
        inner = c * xd * (1.0 + 0.044715 * x2)
        t = np.tanh(inner)
        out = 0.5 * xd * (1.0 + t)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * x2)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    elif approximate == "none":
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        out = xd * cdf

        def bw(g):
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
            return (g * (cdf + xd * pdf),)

    else:
        raise ValueError(f"unknown GELU form {approximate!r}")
    return _make(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in evaluation, survivors scaled by 1/(1-p) in training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw, "dropout")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes.

    ``b`` may be a 2-D weight shared across ``a``'s leading batch axes, or carry
    the same batch axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    k = a.shape[-1]
    if shared:
        # one 2-D GEMM over all batch rows
        out = (a.data.reshape(-1, k) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = np.matmul(a.data, b.data)
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER[0] += 2 * int(np.prod(out.shape)) * k

    def bw(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b``; a 1-D ``x`` is treated as a single row."""
    x = as_tensor(x)
    if x.ndim == 1:
        return reshape(linear(reshape(x, (1, x.shape[0])), w, b), (w.shape[-1],))
    y = matmul(x, w)
    return y if b is None else add(y, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Standardize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shape mismatch for input {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        d = xd.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw, "permute")


def transpose(x: Tensor) -> Tensor:
    """Swap the trailing two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Repeat ``x`` along new leading axes (or size-1 axes) to ``shape``."""
    shape = tuple(shape)
    src = x.shape

    def bw(g):
        return (_unbroadcast(g, src),)

    return _make(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), bw, "broadcast")


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    if len(parts) == 1:
        return parts[0]
    ax = axis % parts[0].ndim
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def concat_tokens(parts) -> Tensor:
    """Stack token matrices ``[t_i, d]`` row-wise into ``[sum t_i, d]``."""
    parts = [as_tensor(p) for p in parts]
    widths = {p.shape[-1] for p in parts}
    if len(widths) > 1:
        raise DimensionError(f"concat_tokens: token widths differ {sorted(widths)}")
    return concat(parts, axis=-2)


def take_rows(x: Tensor, index, axis: int = -2) -> Tensor:
    """Select entries along ``axis`` (an int drops the axis, a sequence keeps it)."""
    ax = axis % x.ndim
    out = np.take(x.data, index, axis=ax)

    def bw(g):
        full = np.zeros_like(x.data)
        idx = [slice(None)] * x.ndim
        idx[ax] = index
        if np.ndim(index) == 0:
            full[tuple(idx)] += g
        else:
            np.add.at(full, tuple(idx), g)
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), bw, "take")


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw, "mean")


# ---------------------------------------------------------------- backward


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of differentiable nodes reachable from ``root``."""
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


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
