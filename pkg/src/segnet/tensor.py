"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for gradient
checking) and optionally records the operation that produced it. Calling
``backward`` on a scalar tensor walks the recorded graph in reverse
topological order and accumulates gradients into every reachable leaf with
``requires_grad=True``.

Feature maps use HWC layout (height, width, channels) with an optional
leading batch axis; see :mod:`segnet.convops` for the convolution and
pooling operators built on top of this engine.

Tensors are treated as immutable once produced by an operation. The only
sanctioned in-place mutation is the optimizer updating leaf parameters
between steps.
"""

from __future__ import annotations

import math
import zlib
from typing import Iterable, Mapping

import numpy as np

ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True

_trace_sink: list | None = None


class trace_activations:
    """Collect activation-pattern fingerprints during forward evaluation.

    ReLU and clip record a checksum of their active masks; global max
    pooling records its argmax indices. A finite-difference probe whose
    two endpoint evaluations disagree in fingerprint has crossed a
    piecewise boundary, where the central difference is not a valid
    derivative estimate; the gradient checker uses this to resample such
    coordinates.
    """

    def __init__(self):
        self.fingerprint: tuple | None = None

    def __enter__(self):
        global _trace_sink
        self._prev = _trace_sink
        _trace_sink = []
        return self

    def __exit__(self, *exc):
        global _trace_sink
        self.fingerprint = tuple(_trace_sink)
        _trace_sink = self._prev
        return False


def _trace_mask(mask: np.ndarray) -> None:
    if _trace_sink is not None:
        _trace_sink.append(zlib.crc32(np.packbits(mask).tobytes()))


def _trace_indices(idx: np.ndarray) -> None:
    if _trace_sink is not None:
        _trace_sink.append(zlib.crc32(np.ascontiguousarray(idx).tobytes()))


class no_grad:
    """Context manager that disables graph recording (cheap inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array node of the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_inputs", "_backward")

    def __init__(self, data, requires_grad=False, inputs=(), op="leaf"):
        data = np.asarray(data)
        if data.dtype not in ALLOWED_DTYPES:
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.op = op
        self._inputs = tuple(inputs) if self.requires_grad else ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor from op '{self.op}'")
        return self

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self.op!r})"


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    """Build a leaf tensor from array-like data, rejecting NaN/Inf."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in ALLOWED_DTYPES:
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite")
    return Tensor(arr, requires_grad=requires_grad)


def _as_pair(a, b):
    """Coerce one plain-scalar/array operand to the other's dtype."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    # Out-of-place addition: the first stored gradient may alias a consumer's
    # buffer, so it must never be mutated in place.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def make_node(data: np.ndarray, inputs: Iterable[Tensor], op: str) -> Tensor:
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=requires, inputs=inputs if requires else (), op=op)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = make_node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = make_node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(g, a.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = make_node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    out = make_node(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                accumulate_grad(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = make_node(-a.data, (a,), "neg")
    if out.requires_grad:
        def _bw(g):
            accumulate_grad(a, -g)
        out._backward = _bw
    return out


def log(a: Tensor) -> Tensor:
    out = make_node(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _bw(g):
            accumulate_grad(a, g / a.data)
        out._backward = _bw
    return out


def relu(a: Tensor) -> Tensor:
    if _trace_sink is not None:
        _trace_mask(a.data > 0)
    out = make_node(np.maximum(a.data, 0), (a,), "relu")
    if out.requires_grad:
        mask = a.data > 0
        def _bw(g):
            accumulate_grad(a, g * mask)
        out._backward = _bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic, clamped into the open interval (0, 1).

    The clamp only bites at saturation (|x| beyond the dtype's resolution)
    and keeps the documented open-interval contract exact for any finite
    input; the derivative uses the clamped output, matching the true
    derivative to within rounding everywhere the clamp is inactive.
    """
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    one = np.asarray(1.0, dtype=x.dtype)
    zero = np.asarray(0.0, dtype=x.dtype)
    np.clip(y, np.nextafter(zero, one), np.nextafter(one, zero), out=y)
    out = make_node(y, (a,), "sigmoid")
    if out.requires_grad:
        def _bw(g):
            accumulate_grad(a, g * y * (1.0 - y))
        out._backward = _bw
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    if _trace_sink is not None:
        _trace_mask((a.data > lo) & (a.data < hi))
    out = make_node(np.clip(a.data, lo, hi), (a,), "clip")
    if out.requires_grad:
        mask = (a.data > lo) & (a.data < hi)
        def _bw(g):
            accumulate_grad(a, g * mask)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Shape and reduction operations
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    out = make_node(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _bw(g):
            accumulate_grad(a, g.reshape(orig))
        out._backward = _bw
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    orig = a.shape
    out = make_node(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast")
    if out.requires_grad:
        def _bw(g):
            accumulate_grad(a, _unbroadcast(g, orig))
        out._backward = _bw
    return out


def _restore_axes(g: np.ndarray, axis, keepdims: bool, in_shape: tuple) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(in_shape))
        else:
            for ax in sorted(axis):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            accumulate_grad(a, _restore_axes(g, axis, keepdims, a.shape))
        out._backward = _bw
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = make_node(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        count = a.size if axis is None else math.prod(a.shape[ax] for ax in axis)
        def _bw(g):
            accumulate_grad(a, _restore_axes(g, axis, keepdims, a.shape) / count)
        out._backward = _bw
    return out


def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"dtype mismatch in concat: {sorted(map(str, dtypes))}")
    axis = axis % tensors[0].ndim
    out = make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        def _bw(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    accumulate_grad(t, piece)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None):
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``.grad`` of every reachable ``requires_grad`` leaf.
    When ``params`` is given, returns ``{name: gradient array}`` covering
    every named parameter; parameters not reachable from the loss get a
    zero gradient of matching shape.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)

    if params is not None:
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
    return None


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; epsilon added outside the square root.

    update = -lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update in lexicographic parameter order."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(p.dtype, copy=False)
