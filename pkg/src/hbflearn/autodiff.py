"""Reverse-mode automatic differentiation over float64 numpy arrays.

The engine is define-by-run: every operation returns a new :class:`Tensor`
that remembers its parents and a backward closure.  Calling
:func:`backward` on a scalar tensor walks the graph in reverse topological
order and accumulates gradients into ``.grad`` of every reachable tensor
with ``requires_grad=True``.  Graphs are rebuilt on every forward pass and
node values are never mutated after creation, so a backward pass is always
consistent with the forward that produced it.

All values are float64.  Every op validates that its output is finite;
NaN/Inf raises :class:`~hbflearn.errors.NumericError` at the op that
produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "backward",
    "zero_grad",
    "add", "sub", "mul", "div", "neg", "scale",
    "matmul", "conv2d",
    "leaky_relu", "sigmoid", "log_softmax", "softmax",
    "exp", "log", "log2", "sqrt", "square", "sin", "cos",
    "tensor_sum", "tensor_mean",
    "reshape", "flatten", "concat",
    "ste_quantize",
    "iter_graph", "graph_has_op",
    "gradient_check", "GradCheckReport",
]

TWO_PI = 2.0 * np.pi


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A node in the autodiff graph: a float64 array plus graph bookkeeping.

    Attributes:
        data: the value, a float64 ndarray (any rank, including 0-d).
        grad: populated by :func:`backward`; same shape as ``data``.
        requires_grad: whether gradients should flow to/through this node.
        op: tag of the operation that produced this node ("leaf" for inputs).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        arr = _as_array(data)
        _check_finite(arr, op)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's value, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    """A non-trainable leaf tensor."""
    return Tensor(data, requires_grad=False)


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents,
                  backward_fn=backward_fn if req else None)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    # Sum away extra leading axes.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    # Sum over axes that were broadcast from size 1.
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting semantics)
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data
    _check_finite(out_data, "add")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make("add", out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data
    _check_finite(out_data, "sub")

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make("sub", out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data
    _check_finite(out_data, "mul")

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make("mul", out_data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    _check_finite(out_data, "div")

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out_data / b.data, b.data.shape))

    return _make("div", out_data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _make("neg", -a.data, (a,), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    out_data = a.data * c
    _check_finite(out_data, "scale")

    def bwd(g):
        _accum(a, g * c)

    return _make("scale", out_data, (a,), bwd)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Supports 2-D operands and batched 3-D operands
    with numpy ``matmul`` broadcasting (e.g. ``(B,m,n) @ (n,p)``)."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires operands of rank >= 2")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}") from e
    _check_finite(out_data, "matmul")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make("matmul", out_data, (a, b), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2-D convolution, stride 1, zero padding preserving spatial size.

    ``x`` is (batch, in_ch, H, W); ``w`` is (out_ch, in_ch, k, k) with k odd;
    ``b`` is (out_ch,).  Implemented as a sum of shifted views, which is
    fast for the small spatial grids used here.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    bs, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError("conv2d kernel must be square with odd size")
    if b.data.shape != (cout,):
        raise DimensionError("conv2d bias must have shape (out_channels,)")
    pad = kh // 2

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_data = np.empty((bs, cout, h, wd))
    out_data[:] = b.data.reshape(1, cout, 1, 1)
    # (u, v) indexes the kernel tap; each tap is a plain matmul over channels.
    for u in range(kh):
        for v in range(kw):
            xv = xp[:, :, u:u + h, v:v + wd]              # (bs, cin, h, wd)
            prod = np.tensordot(w.data[:, :, u, v], xv, axes=([1], [1]))
            out_data += prod.transpose(1, 0, 2, 3)
    _check_finite(out_data, "conv2d")

    def bwd(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for u in range(kh):
                for v in range(kw):
                    xv = xp[:, :, u:u + h, v:v + wd]
                    gw[:, :, u, v] = np.tensordot(g, xv, axes=([0, 2, 3], [0, 2, 3]))
            _accum(w, gw)
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, u, v], axes=([1], [0]))
                    gxp[:, :, u:u + h, v:v + wd] += contrib.transpose(0, 3, 1, 2)
            _accum(x, gxp[:, :, pad:pad + h, pad:pad + wd])

    return _make("conv2d", out_data, (x, w, b), bwd)


# ----------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------

def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, slope * a.data)

    def bwd(g):
        _accum(a, np.where(mask, g, slope * g))

    return _make("leaky_relu", out_data, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Numerically stable split form; never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def bwd(g):
        _accum(a, g * s * (1.0 - s))

    return _make("sigmoid", s, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse
    _check_finite(out_data, "log_softmax")

    def bwd(g):
        sm = np.exp(out_data)
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make("log_softmax", out_data, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    _check_finite(out_data, "exp")

    def bwd(g):
        _accum(a, g * out_data)

    return _make("exp", out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    _check_finite(out_data, "log")

    def bwd(g):
        _accum(a, g / a.data)

    return _make("log", out_data, (a,), bwd)


def log2(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log2(a.data)
    _check_finite(out_data, "log2")
    inv_ln2 = 1.0 / np.log(2.0)

    def bwd(g):
        _accum(a, g * inv_ln2 / a.data)

    return _make("log2", out_data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)
    _check_finite(out_data, "sqrt")

    def bwd(g):
        _accum(a, g * 0.5 / out_data)

    return _make("sqrt", out_data, (a,), bwd)


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data
    _check_finite(out_data, "square")

    def bwd(g):
        _accum(a, g * 2.0 * a.data)

    return _make("square", out_data, (a,), bwd)


def sin(a: Tensor) -> Tensor:
    out_data = np.sin(a.data)

    def bwd(g):
        _accum(a, g * np.cos(a.data))

    return _make("sin", out_data, (a,), bwd)


def cos(a: Tensor) -> Tensor:
    out_data = np.cos(a.data)

    def bwd(g):
        _accum(a, -g * np.sin(a.data))

    return _make("cos", out_data, (a,), bwd)


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    _check_finite(np.atleast_1d(out_data), "sum")
    in_shape = a.data.shape

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(gg, axis=axes)
        _accum(a, np.broadcast_to(gg, in_shape).copy())

    return _make("sum", out_data, (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    _check_finite(np.atleast_1d(out_data), "mean")
    in_shape = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [in_shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g):
        gg = np.asarray(g) / count
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            gg = np.expand_dims(gg, axis=axes)
        _accum(a, np.broadcast_to(gg, in_shape).copy())

    return _make("mean", out_data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(in_shape))

    return _make("reshape", out_data, (a,), bwd)


def flatten(a: Tensor) -> Tensor:
    """Collapse all axes after the first (batch) axis."""
    return reshape(a, (a.data.shape[0], -1))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make("concat", out_data, tensors, bwd)


# ----------------------------------------------------------------------
# straight-through quantization
# ----------------------------------------------------------------------

def quantize_unit(t: np.ndarray, q_bits: int) -> np.ndarray:
    """Map values in [0, 1] onto the 2^q-point phase grid in (0, 2*pi] (0 stays 0)."""
    levels = float(2 ** q_bits)
    return TWO_PI * np.ceil(t * levels) / levels


def ste_quantize(t: Tensor, q_bits: int) -> Tensor:
    """Quantized phase output with a straight-through backward.

    Forward emits grid phases ``2*pi*ceil(t*2^q)/2^q``; the backward pass
    treats the op as the linear map ``t -> 2*pi*t`` so the staircase never
    reaches the gradient.
    """
    if q_bits < 1:
        raise DimensionError("ste_quantize requires q_bits >= 1")
    out_data = quantize_unit(t.data, q_bits)

    def bwd(g):
        _accum(t, g * TWO_PI)

    return _make("ste_quantize", out_data, (t,), bwd)


# ----------------------------------------------------------------------
# backward pass and graph utilities
# ----------------------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order  # parents before children


def backward(loss: Tensor, params=None) -> None:
    """Backpropagate from a scalar loss.

    Gradients accumulate into ``.grad`` of every reachable tensor with
    ``requires_grad=True``.  If ``params`` is given, any parameter the loss
    does not depend on gets an explicit zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def iter_graph(root: Tensor):
    """Yield every node reachable from ``root`` (including it)."""
    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        yield node
        stack.extend(node._parents)


def graph_has_op(root: Tensor, op: str) -> bool:
    return any(n.op == op for n in iter_graph(root))


# ----------------------------------------------------------------------
# finite-difference gradient verification
# ----------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-parameter comparison of autodiff against central differences.

    ``kink_margin`` (set by the network-level checker) is the distance of
    the closest pre-activation to a leaky-ReLU kink: finite differences are
    only trustworthy when it comfortably exceeds the step size.
    """
    max_rel_error: float
    per_param: list = field(default_factory=list)
    non_differentiable: bool = False
    kink_margin: float | None = None

    def passed(self, tol: float) -> bool:
        return not self.non_differentiable and self.max_rel_error < tol


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise relative error with a small-magnitude floor.

    The floor keeps coordinates whose true gradient is tiny (where central
    differences are dominated by float64 round-off) from being compared in
    purely relative terms.
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradient_check(loss_fn, params, h: float = 1e-5, floor: float = 1e-4) -> GradCheckReport:
    """Compare autodiff gradients of ``loss_fn`` with central differences.

    ``loss_fn`` takes no arguments, reads the current ``.data`` of every
    tensor in ``params`` and returns a scalar :class:`Tensor`.  If the graph
    contains a hard quantizer (an ``ste_quantize`` node), the check refuses:
    the function is not differentiable and finite differences would measure
    the staircase, not a gradient.  Swap the quantizer for its smooth
    surrogate in the forward pass before checking.

    Cost is two forward passes per scalar parameter; intended for small
    models and tests.
    """
    zero_grad(params)
    loss = loss_fn()
    if graph_has_op(loss, "ste_quantize"):
        return GradCheckReport(max_rel_error=np.inf, non_differentiable=True)
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    per_param = []
    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
        err = rel_error(a, numeric, floor)
        per_param.append(err)
        worst = max(worst, err)
    return GradCheckReport(max_rel_error=worst, per_param=per_param)
