"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure computing the parents' gradients.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order.

Broadcasting follows numpy's trailing-dimension rules; gradients are summed
back over broadcast dimensions.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GraphConsumedError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv1d",
    "relu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "reduce_stats",
    "tsum",
    "tmean",
    "tabs",
    "tsqrt",
    "split",
    "concat",
    "transpose",
    "reshape",
    "grad_check",
    "GradCheckReport",
]


class GraphConsumedError(RuntimeError):
    """Raised when backward is called twice through the same graph."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float array that can take part in a backward pass."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ----------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- backward -----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf
        with ``requires_grad``.  ``self`` must be a scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward call")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node._consumed = True
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # release saved intermediates
        for node in order:
            if node._backward is not None:
                node._backward = _consumed_backward
                node._parents = ()


def _consumed_backward(g):
    raise GraphConsumedError("graph already consumed")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# helpers


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise NonFiniteError(f"{op} produced a non-finite value at index {bad}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    zero = b.data == 0
    if zero.any():
        idx = tuple(int(i) for i in np.argwhere(zero)[0])
        raise ZeroDivisionError(f"div: divisor is zero at index {idx}")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tabs(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def tsqrt(a: Tensor) -> Tensor:
    """Square root whose gradient is defined as 0 where the output is 0."""
    if (a.data < 0).any():
        idx = tuple(int(i) for i in np.argwhere(a.data < 0)[0])
        raise ValueError(f"sqrt of negative value at index {idx}")
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0),)

    return _make(out, (a,), backward, "sqrt")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)

    def backward(g):
        return (g * out * (1 - out),)

    return _make(out, (a,), backward, "sigmoid")


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reduce_stats(x: Tensor, axis: int, keepdims: bool = False) -> tuple[Tensor, Tensor]:
    """Mean and population standard deviation along ``axis``."""
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] < 1:
        raise ValueError("reduce_stats over an empty axis")
    mean = tmean(x, axis, keepdims=True)
    dev = x - mean
    std = tsqrt(tmean(dev * dev, axis, keepdims=True))
    if not keepdims:
        mean = reshape(mean, tuple(n for i, n in enumerate(mean.shape) if i != axis))
        std = reshape(std, mean.shape)
    return mean, std


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match channels {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    rstd = np.where(denom > 0, 1 / np.sqrt(np.where(denom > 0, denom, 1)), 0)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, c).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Cross-correlation along the time axis.

    ``x`` is ``(..., T, Cin)``, ``w`` is ``(K, Cin, Cout)``.  ``same`` zero-pads
    ``(K-1)/2`` frames at each end and needs an odd K; ``valid`` yields
    ``T-K+1`` frames.
    """
    k, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if padding == "same":
        if k % 2 == 0:
            raise ValueError(f"conv1d: same padding needs an odd kernel, got K={k}")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    t = x.shape[-2]
    lead = x.shape[:-2]
    if pad:
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
        xp = np.pad(x.data, widths)
    else:
        xp = x.data
    t_out = xp.shape[-2] - k + 1
    if t_out < 1:
        raise ValueError(f"conv1d: input length {t} shorter than kernel {k}")
    # (..., T', Cin, K) -> (..., T', K, Cin) -> (..., T', K*Cin)
    win = sliding_window_view(xp, k, axis=-2)
    cols = np.swapaxes(win, -1, -2).reshape(*lead, t_out, k * cin)
    wmat = w.data.reshape(k * cin, cout)
    out = cols @ wmat
    if bias is not None:
        if bias.shape != (cout,):
            raise ValueError(f"conv1d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data

    def backward(g):
        gx = gw = gbias = None
        if x.requires_grad:
            gcols = (g @ wmat.T).reshape(*lead, t_out, k, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j in range(k):
                gxp[..., j : j + t_out, :] += gcols[..., j, :]
            gx = gxp[..., pad : pad + t, :] if pad else gxp
        if w.requires_grad:
            gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if bias is not None and bias.requires_grad:
            gbias = g.reshape(-1, cout).sum(axis=0)
        return gx, gw, gbias

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv1d")


# ---------------------------------------------------------------------------
# shape manipulation


def split(x: Tensor, axis: int = -1) -> tuple[Tensor, Tensor]:
    """Chunk ``x`` into two equal halves along ``axis``."""
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]
    if n % 2:
        raise ValueError(f"split: axis {axis} has odd size {n}")
    h = n // 2
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, h)
    hi[axis] = slice(h, n)
    return _getitem(x, tuple(lo)), _getitem(x, tuple(hi))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = _norm_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ValueError(
                f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), backward, "concat")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def _getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out), (x,), backward, "slice")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    analytic: list[np.ndarray] = field(default_factory=list)
    numeric: list[np.ndarray] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failing


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-6,
    analytic: Sequence[np.ndarray] | None = None,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f(*xs)`` must return a scalar tensor.  Each coordinate of each input is
    perturbed in place by ``±step``.  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; coordinates above ``tol`` are listed
    in the report as ``(input index, element index)``.  Pass ``analytic`` to
    check externally supplied gradients instead of running backward.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    if analytic is None:
        for t in xs:
            t.grad = None
        f(*xs).backward()
        analytic = [
            np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs
        ]
    report = GradCheckReport(0.0, analytic=[np.asarray(a) for a in analytic])
    for n, t in enumerate(xs):
        t.data = np.ascontiguousarray(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*xs).data)
                flat[i] = orig - step
                fm = float(f(*xs).data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        report.numeric.append(numeric)
        a = np.asarray(analytic[n]).reshape(-1)
        num = numeric.reshape(-1)
        rel = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        if rel.size:
            report.max_rel_error = max(report.max_rel_error, float(rel.max()))
        for i in np.flatnonzero(rel > tol):
            report.failing.append((n, tuple(int(j) for j in np.unravel_index(i, t.shape))))
    return report
