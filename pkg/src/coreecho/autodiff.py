"""Tape-based reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the vector-Jacobian product.  :func:`backward` walks the
graph in reverse topological order and accumulates ``.grad`` on every leaf
that requires it.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

_DTYPE = np.float64


class ShapeError(ValueError):
    """Operands of an op do not have conforming shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense array plus the record needed to differentiate through it."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf",
                 _backward: Callable | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = tuple(_parents)
        self.op = _op
        self._backward = _backward
        self._consumed = False
        self._cut: tuple[Tensor, ...] = ()  # sources hidden behind a stop_gradient

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Named trainable leaf."""

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite value produced")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(op, data)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype if data.dtype in (np.float32, np.float64) else None)
    if needs:
        out.parents = tuple(parents)
        out.op = op
        out._backward = backward
    else:
        out.op = op
        out._cut = tuple(p for p in parents if p._cut)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise DomainError("reciprocal: division by zero")
    out = 1.0 / a.data
    return _make("reciprocal", out, (a,), lambda g: (-g * out * out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0.0),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    # sign(0) == 0 gives the zero subgradient at the kink
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(x: np.ndarray) -> np.ndarray:
    # erfc form keeps the lower tail exact instead of cancelling to zero
    return 0.5 * erfc(-x * _INV_SQRT2)


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = normal_cdf(x)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make("gelu", x * cdf, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, mask=None, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp over ``axis``.

    ``mask`` (boolean, broadcastable to ``a``) restricts the sum to the
    selected entries; every reduced slice must select at least one entry.
    """
    a = as_tensor(a)
    x = a.data
    axis = axis % x.ndim
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=axis).all():
            raise DomainError("logsumexp: empty mask slice")
    shifted_src = np.where(m, x, -np.inf)
    peak = shifted_src.max(axis=axis, keepdims=True)
    w = np.where(m, np.exp(shifted_src - peak), 0.0)
    total = w.sum(axis=axis, keepdims=True)
    out = peak + np.log(total)
    soft = w / total

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _make("logsumexp", res, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.asarray(a.data[idx]), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, ts, bw)


def append_ones(a) -> Tensor:
    """``[x; 1]`` along the last axis (augmented-bias convention)."""
    a = as_tensor(a)
    ones = np.ones(a.shape[:-1] + (1,), dtype=a.data.dtype)
    return concat([a, Tensor(ones, dtype=a.data.dtype)], axis=-1)


def stop_gradient(a) -> Tensor:
    """Forward identity that cuts the graph: nothing flows back into ``a``."""
    a = as_tensor(a)
    out = Tensor(a.data, requires_grad=False, dtype=a.data.dtype)
    out.op = "stop_gradient"
    out.grad = np.zeros_like(a.data)
    out._cut = (a,)
    return out


# ---------------------------------------------------------------------------
# layers


def pairwise_l2(e) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-D tensor."""
    e = as_tensor(e)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ShapeError("pairwise_l2", e.shape)
    x = e.data
    diff = x[:, None, :] - x[None, :, :]
    sq = np.maximum(np.einsum("ijk,ijk->ij", diff, diff), 0.0)
    dist = np.sqrt(sq)
    np.fill_diagonal(dist, 0.0)

    def bw(g):
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, (g + g.T) / safe, 0.0)
        return (np.einsum("ij,ijk->ik", coef, diff),)

    return _make("pairwise_l2", dist, (e,), bw)


class RunningStats:
    """Batch-norm running mean/variance buffers."""

    def __init__(self, features: int, momentum: float = 0.1, dtype=None):
        dtype = dtype or _DTYPE
        self.mean = np.zeros(features, dtype=dtype)
        self.var = np.ones(features, dtype=dtype)
        self.momentum = momentum


def batch_norm(x, weight, bias, stats: RunningStats, training: bool, eps: float = 1e-5) -> Tensor:
    """Normalise over every axis but the last (the feature axis)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    feat = x.shape[-1]
    if weight.shape != (feat,) or bias.shape != (feat,):
        raise ShapeError("batch_norm", x.shape, weight.shape, bias.shape)
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))
    if training:
        if count < 2:
            raise ValueError("batch_norm: train mode needs at least 2 samples per feature")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = stats.momentum
        stats.mean = (1 - m) * stats.mean + m * mu
        stats.var = (1 - m) * stats.var + m * var * (count / (count - 1))
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * weight.data + bias.data

    def bw(g):
        gw = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * weight.data
        if training:
            gx = inv / count * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, gw, gb

    return _make("batch_norm", out, (x, weight, bias), bw)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def _conv_windows(xp: np.ndarray, k: tuple[int, int, int], stride: tuple[int, int, int], out_sp):
    # (B, T', H', W', kT, kH, kW, C) strided view of a padded input
    b, _, _, _, c = xp.shape
    s0, s1, s2, s3, s4 = xp.strides
    shape = (b, *out_sp, *k, c)
    strides = (s0, s1 * stride[0], s2 * stride[1], s3 * stride[2], s1, s2, s3, s4)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)


def conv3d(x, w, stride=(1, 1, 1), padding=(1, 1, 1)) -> Tensor:
    """Channels-last 3-D convolution.

    x: (B, T, H, W, Cin); w: (kT, kH, kW, Cin, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[3]:
        raise ShapeError("conv3d", x.shape, w.shape)
    k = w.shape[:3]
    pads = ((0, 0), *[(p, p) for p in padding], (0, 0))
    xp = np.pad(x.data, pads)
    out_sp = tuple((xp.shape[i + 1] - k[i]) // stride[i] + 1 for i in range(3))
    if min(out_sp) < 1:
        raise ShapeError("conv3d", x.shape, w.shape)
    cols = _conv_windows(xp, k, stride, out_sp)
    b = x.shape[0]
    kdim = int(np.prod(k)) * x.shape[-1]
    cols2d = cols.reshape(-1, kdim)
    w2d = w.data.reshape(kdim, -1)
    out = (cols2d @ w2d).reshape(b, *out_sp, -1)

    def bw(g):
        g2d = g.reshape(-1, g.shape[-1])
        gw = (cols2d.T @ g2d).reshape(w.shape) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gcols = (g2d @ w2d.T).reshape(b, *out_sp, *k, x.shape[-1])
        gxp = np.zeros_like(xp)
        t_o, h_o, w_o = out_sp
        for i in range(k[0]):
            for j in range(k[1]):
                for l in range(k[2]):
                    gxp[:, i:i + stride[0] * t_o:stride[0],
                        j:j + stride[1] * h_o:stride[1],
                        l:l + stride[2] * w_o:stride[2], :] += gcols[:, :, :, :, i, j, l, :]
        gx = gxp[:, padding[0]:xp.shape[1] - padding[0],
                 padding[1]:xp.shape[2] - padding[1],
                 padding[2]:xp.shape[3] - padding[2], :]
        return gx, gw

    return _make("conv3d", np.ascontiguousarray(out), (x, w), bw)


# ---------------------------------------------------------------------------
# dispatch

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "abs": abs_,
    "sigmoid": sigmoid,
    "logsumexp": logsumexp,
}


def eval_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise BackwardError("backward already ran on this graph; call zero_grad and rebuild")
    if not root.requires_grad:
        _zero_fill(root)
        root._consumed = True
        return
    order = _topo_order(root)
    leaves = [n for n in order if n.is_leaf]
    for leaf in leaves:
        if leaf.grad is not None:
            raise BackwardError("leaf gradient not reset; call zero_grad before another backward")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.data.dtype)
    _zero_fill(root)
    root._consumed = True


def _zero_fill(root: Tensor) -> None:
    # trainable leaves that got nothing (including those behind a stop_gradient)
    # end with an exact zero gradient rather than None
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.is_leaf and node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)
        stack.extend(node.parents)
        stack.extend(node._cut)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


class NondeterministicLossError(RuntimeError):
    pass


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tolerance: float = 1e-6, max_entries: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-3,
               fd_fn: Callable[[], Tensor] | None = None) -> dict:
    """Compare analytic gradients against central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values each
    call and must be deterministic.  Per-entry error is
    ``|a - n| / max(|a|, |n|, floor)`` so that entries whose true gradient
    is ~0 are judged on absolute error.  Returns a dict with keys
    ``max_rel_error``, ``per_param``, ``flagged`` and ``passed``.

    ``fd_fn`` (default ``loss_fn``) is the function differenced numerically.
    Pass the surrogate a parameter group actually receives when ``loss_fn``
    routes some paths through :func:`stop_gradient`.
    """
    fd_fn = fd_fn or loss_fn
    zero_grad(params)
    first = loss_fn()
    second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise NondeterministicLossError("loss builder returned different values for identical inputs")
    backward(first)
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad, copy=True) for p in params]
    zero_grad(params)

    per_param = {}
    flagged = []
    worst = 0.0
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        name = getattr(p, "name", f"param{idx}")
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        err_max = 0.0
        for e in entries:
            orig = flat[e]
            flat[e] = orig + h
            up = fd_fn().item()
            flat[e] = orig - h
            down = fd_fn().item()
            flat[e] = orig
            num = (up - down) / (2 * h)
            err = _rel_err(ga.reshape(-1)[e], num, floor)
            if err > tolerance:
                flagged.append((name, int(e), float(ga.reshape(-1)[e]), num))
            err_max = max(err_max, err)
        per_param[name] = err_max
        worst = max(worst, err_max)
    return {"max_rel_error": worst, "per_param": per_param, "flagged": flagged,
            "passed": not flagged}


def _rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)
