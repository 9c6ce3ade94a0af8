"""A small reverse-mode differentiation engine over dense float64 arrays.

Define-by-run: every operation returns a ``Tensor`` holding its forward value
and a closure that routes the incoming gradient to its parents.  Graphs are
rebuilt per training iteration; the expensive work happens inside numpy/BLAS
kernels (conv2d is im2col + one GEMM), so graph bookkeeping stays negligible.
Backward closures never capture their own output node, keeping the graph
cycle-free for reference counting — intermediate buffers are reclaimed the
moment the last consumer releases them.

Forward values are checked for finiteness after every primitive and a
:class:`NumericError` names the offending node.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit as _expit

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class NumericError(ArithmeticError):
    """A primitive produced non-finite values (overflow, 0/0, log of <= 0, ...)."""


def _check_finite(data: np.ndarray, name: str) -> None:
    # One-pass check: the sum is non-finite iff the array holds inf/nan
    # (no finite overflow is reachable at this package's value scales).
    if not math.isfinite(float(data.sum())):
        raise NumericError(f"non-finite values in node '{name}'")


class Tensor:
    """A node in the differentiation graph: forward value plus gradient plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "tensor"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        _check_finite(self.data, name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.data.shape})"

    # -- arithmetic sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, name="const")


def _node(data: np.ndarray, parents: tuple, name: str, check: bool = True) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = name
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    if check:
        _check_finite(data, name)
    return out


def _accum(t: Tensor, value: np.ndarray, fresh: bool) -> None:
    """Add ``value`` into ``t.grad``; a ``fresh`` buffer may be adopted directly."""
    if t.grad is None:
        t.grad = value if fresh else value.copy()
    else:
        t.grad += value


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, forward, back_a, back_b, fresh_a: bool, fresh_b: bool, name: str) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    try:
        data = forward(a.data, b.data)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = _node(data, (a, b), name)
    if out.requires_grad:

        def backward_fn(g):
            if a.requires_grad:
                reduced = _unbroadcast(back_a(g), a.data.shape)
                _accum(a, reduced, fresh_a or reduced is not g)
            if b.requires_grad:
                reduced = _unbroadcast(back_b(g), b.data.shape)
                _accum(b, reduced, fresh_b or reduced is not g)

        out._backward = backward_fn
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g, False, False, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g, False, True, "sub")


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    return _binary(a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data, True, True, "mul")


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _binary(
            a,
            b,
            np.divide,
            lambda g: g / b.data,
            lambda g: -g * a.data / (b.data * b.data),
            True,
            True,
            "div",
        )


def neg(a) -> Tensor:
    a = _ensure(a)
    out = _node(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda g: _accum(a, -g, True)
    return out


def _unary(a, data: np.ndarray, grad_fn, name: str, fresh: bool = True, check: bool = True) -> Tensor:
    out = _node(data, (a,), name, check)
    if out.requires_grad:
        out._backward = lambda g: _accum(a, grad_fn(g), fresh)
    return out


def square(a) -> Tensor:
    a = _ensure(a)
    return _unary(a, a.data * a.data, lambda g: g * (2.0 * a.data), "square")


def sqrt(a) -> Tensor:
    a = _ensure(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _unary(a, data, lambda g: g * (0.5 / data), "sqrt")


def exp(a) -> Tensor:
    a = _ensure(a)
    data = np.exp(a.data)
    return _unary(a, data, lambda g: g * data, "exp")


def log(a) -> Tensor:
    a = _ensure(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary(a, np.log(a.data), lambda g: g / a.data, "log")


def erf(a) -> Tensor:
    a = _ensure(a)
    return _unary(
        a, _erf(a.data), lambda g: g * (_TWO_OVER_SQRT_PI * np.exp(-a.data * a.data)), "erf"
    )


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    data = _expit(a.data)
    return _unary(a, data, lambda g: g * (data * (1.0 - data)), "sigmoid")


def softplus(a) -> Tensor:
    a = _ensure(a)
    return _unary(a, np.logaddexp(0.0, a.data), lambda g: g * _expit(a.data), "softplus")


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = _ensure(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _unary(a, scale * a.data, lambda g: g * scale, "leaky_relu")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _unary(a, np.asarray(data), grad_fn, "sum")


def mean(a) -> Tensor:
    a = _ensure(a)
    n = a.data.size
    return _unary(
        a, np.asarray(a.data.mean()), lambda g: np.full(a.data.shape, float(g) / n), "mean"
    )


def reshape(a, shape) -> Tensor:
    # A pure view: the parent's values were already checked at creation.
    a = _ensure(a)
    return _unary(
        a, a.data.reshape(shape), lambda g: g.reshape(a.data.shape), "reshape", fresh=False, check=False
    )


def narrow(a, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) of a 1-d tensor."""
    a = _ensure(a)
    if a.data.ndim != 1:
        raise ValueError(f"narrow expects a 1-d tensor, got shape {a.data.shape}")
    if start < 0 or start + length > a.data.size:
        raise ValueError(
            f"narrow window [{start}, {start + length}) out of bounds for size {a.data.size}"
        )
    out = _node(a.data[start : start + length], (a,), "narrow", check=False)
    if out.requires_grad:

        def backward_fn(g):
            # Scatter-adjoint, accumulated in place: many disjoint slices of one
            # parent share a single gradient buffer instead of allocating a
            # full-size scratch array each.
            if a.grad is None:
                a.grad = np.zeros(a.data.size)
            a.grad[start : start + length] += g

        out._backward = backward_fn
    return out


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:

        def backward_fn(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T, True)
            if b.requires_grad:
                _accum(b, a.data.T @ g, True)

        out._backward = backward_fn
    return out


def _im2col(xp: np.ndarray, out_h: int, out_w: int, stride: int) -> np.ndarray:
    """Column buffer for a 3x3 kernel in (ky, kx, c) order.

    Nine contiguous block copies; the (ky, kx) leading layout makes each
    destination block contiguous, which copies measurably faster than the
    channel-leading alternative.
    """
    c = xp.shape[0]
    col = np.empty((3, 3, c, out_h, out_w))
    for ky in range(3):
        for kx in range(3):
            col[ky, kx] = xp[:, ky : ky + stride * out_h : stride, kx : kx + stride * out_w : stride]
    return col.reshape(9 * c, out_h * out_w)


def conv2d(x, w, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1; x is (C, H, W), w is (O, C, 3, 3)."""
    x, w = _ensure(x), _ensure(w)
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ValueError(
            f"conv2d: expected (C,H,W) and (O,C,3,3), got {x.data.shape} and {w.data.shape}"
        )
    c, h, width = x.data.shape
    o = w.data.shape[0]
    if w.data.shape[1] != c:
        raise ValueError(f"conv2d: input channels {c} do not match weight channels {w.data.shape[1]}")
    out_h = (h + 2 - 3) // stride + 1
    out_w = (width + 2 - 3) // stride + 1
    xp = np.zeros((c, h + 2, width + 2))
    xp[:, 1:-1, 1:-1] = x.data
    col = _im2col(xp, out_h, out_w, stride)
    # Weight matrix in the col's (ky, kx, c) order.
    w_flat = w.data.transpose(2, 3, 1, 0).reshape(9 * c, o)
    out = _node((w_flat.T @ col).reshape(o, out_h, out_w), (x, w), "conv2d")
    if out.requires_grad:

        def backward_fn(g):
            g_flat = g.reshape(o, out_h * out_w)
            if w.requires_grad:
                gw = (g_flat @ col.T).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
                _accum(w, np.ascontiguousarray(gw), True)
            if x.requires_grad:
                g_col = (w_flat @ g_flat).reshape(3, 3, c, out_h, out_w)
                gxp = np.zeros_like(xp)
                for ky in range(3):
                    for kx in range(3):
                        gxp[:, ky : ky + stride * out_h : stride, kx : kx + stride * out_w : stride] += g_col[ky, kx]
                _accum(x, np.ascontiguousarray(gxp[:, 1:-1, 1:-1]), True)

        out._backward = backward_fn
    return out


def channel_norm(x, eps: float = 1e-5) -> Tensor:
    """Standardize each channel map of a (C, H, W) tensor to zero mean, unit variance.

    The single-image counterpart of batch normalization without its affine
    part; ``eps`` keeps the rescale finite on constant channels.
    """
    x = _ensure(x)
    if x.data.ndim != 3:
        raise ValueError(f"channel_norm: expected (C,H,W), got {x.data.shape}")
    count = x.data.shape[1] * x.data.shape[2]
    m = x.data.mean(axis=(1, 2), keepdims=True)
    centered = x.data - m
    var = np.einsum("chw,chw->c", centered, centered)[:, None, None] / count
    inv = 1.0 / np.sqrt(var + eps)
    data = centered * inv

    def grad_fn(g):
        g_mean = g.mean(axis=(1, 2), keepdims=True)
        proj = np.einsum("chw,chw->c", g, data)[:, None, None] / count
        return inv * (g - g_mean - data * proj)

    return _unary(x, data, grad_fn, "channel_norm")


def upsample_nearest(x) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (C, H, W) tensor."""
    x = _ensure(x)
    if x.data.ndim != 3:
        raise ValueError(f"upsample_nearest: expected (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    data = np.empty((c, 2 * h, 2 * w))
    data.reshape(c, h, 2, w, 2)[:] = x.data[:, :, None, :, None]
    return _unary(x, data, lambda g: g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)), "upsample_nearest")


def apply_linear(op, x) -> Tensor:
    """Apply a fixed linear map with an exact adjoint (e.g. the projector)."""
    x = _ensure(x)
    out = _node(op.forward(x.data), (x,), "linear_map")
    if out.requires_grad:
        out._backward = lambda g: _accum(x, op.adjoint(g), True)
    return out


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; leaf gradients land in ``.grad``.

    Gradients of nodes untouched by the loss stay ``None``; call
    :func:`zero_gradients` before re-running backward on the same graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not loss:
                # The gradient has been fully routed to the parents; intermediate
                # buffers can be reclaimed immediately.
                node.grad = None


def zero_gradients(loss: Tensor) -> None:
    """Clear ``.grad`` on every node reachable from ``loss``."""
    stack = [loss]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        node.grad = None
        stack.extend(node._parents)
