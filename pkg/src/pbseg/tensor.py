"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op builds its output through :func:`_record`, which
stamps the producing node with a monotonically increasing sequence number.
``backward`` gathers the nodes reachable from the loss and sweeps them in
descending sequence order, i.e. exactly the reverse of execution order.

The module also owns the FLOP counter used by the benchmark: when a
:func:`count_flops` context is active, every op adds its documented cost
to the currently open stage.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_seq = itertools.count()
_state = threading.local()


def _local():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.flops = None
        _state.stage = "other"
    return _state


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled() -> bool:
    return _local().grad_enabled


@contextlib.contextmanager
def count_flops() -> Iterator[Counter]:
    """Collect per-stage FLOP counts of all ops executed inside the block."""
    st = _local()
    prev = st.flops
    st.flops = Counter()
    try:
        yield st.flops
    finally:
        st.flops = prev


@contextlib.contextmanager
def flop_stage(name: str) -> Iterator[None]:
    st = _local()
    prev = st.stage
    st.stage = name
    try:
        yield
    finally:
        st.stage = prev


def _add_flops(n: int) -> None:
    st = _local()
    if st.flops is not None:
        st.flops[st.stage] += int(n)


class _Node:
    __slots__ = ("seq", "parents", "backward", "name")

    def __init__(self, parents, backward, name):
        self.seq = next(_seq)
        self.parents = parents
        self.backward = backward
        self.name = name


class Tensor:
    """Row-major float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None

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
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # operators
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Wrap an op result; attach a graph node only if some parent needs grad."""
    if _local().grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._node = _Node(tuple(parents), backward, name)
        return out
    return Tensor(data)


class ComputationRecord:
    """The differentiable ops that produced ``root``, in execution order."""

    def __init__(self, root: Tensor):
        nodes: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in t._node.parents if p.requires_grad)
        self.outputs = sorted(nodes.values(), key=lambda t: t._node.seq)

    def __len__(self) -> int:
        return len(self.outputs)

    def op_names(self) -> list[str]:
        return [t._node.name for t in self.outputs]


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf needing grad."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grad = np.asarray(grad, dtype=np.float64)
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        return
    record = ComputationRecord(loss)
    pending: dict[int, np.ndarray] = {id(loss): grad}
    for out in reversed(record.outputs):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        grads = node.backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64, copy=True)
                else:
                    parent.grad += pg
            else:
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data
    _add_flops(out.size)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data
    _add_flops(out.size)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data
    _add_flops(out.size)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    _add_flops(out.size)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw, "div")


_ELEMWISE = {"add": add, "sub": sub, "mul": mul}


def elemwise(op: str, a, b) -> Tensor:
    """Broadcasting ``add``/``sub``/``mul`` selected by name."""
    try:
        fn = _ELEMWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    _add_flops(out.size)
    return _record(out, (t,), lambda g: (g * out,), "exp")


def log(t: Tensor) -> Tensor:
    out = np.log(t.data)
    _add_flops(out.size)
    return _record(out, (t,), lambda g: (g / t.data,), "log")


def sqrt(t: Tensor) -> Tensor:
    out = np.sqrt(t.data)
    _add_flops(out.size)
    return _record(out, (t,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(t: Tensor) -> Tensor:
    out = expit(t.data)
    _add_flops(out.size)
    return _record(out, (t,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(t: Tensor) -> Tensor:
    out = np.maximum(t.data, 0.0)
    _add_flops(out.size)
    return _record(out, (t,), lambda g: (g * (t.data > 0),), "relu")


def softplus(t: Tensor) -> Tensor:
    x = t.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    _add_flops(out.size)
    return _record(out, (t,), lambda g: (g * expit(x),), "softplus")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _add_flops(out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (t,), bw, "softmax")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    _add_flops(out.size)

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (t,), bw, "log_softmax")


def activation(kind: str, t: Tensor, axis: int = -1) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(t)
    if kind == "relu":
        return relu(t)
    if kind == "softmax":
        return softmax(t, axis)
    raise ValueError(f"unknown activation {kind!r}")


def l2_normalize(t: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Divide each slice along ``axis`` by ``max(||slice||_2, eps)``."""
    norm = np.sqrt((t.data**2).sum(axis=axis, keepdims=True))
    clamped = norm <= eps
    den = np.where(clamped, eps, norm)
    out = t.data / den
    _add_flops(out.size)

    def bw(g):
        proj = (g * t.data).sum(axis=axis, keepdims=True)
        safe = np.where(clamped, 1.0, norm)
        full = g / den - t.data * proj / safe**3
        return (np.where(clamped, g / eps, full),)

    return _record(out, (t,), bw, "l2_normalize")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    _add_flops(out.size)
    n = x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = inv / n * (n * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        gw = _unbroadcast(g * xhat, weight.shape) if weight.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gw, gb

    return _record(out, (x, weight, bias), bw, "layer_norm")


# --------------------------------------------------------------------------
# reductions, shape ops
# --------------------------------------------------------------------------

def sum_(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(t.data.sum(axis=axis, keepdims=keepdims))
    _add_flops(t.size)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape),)

    return _record(out, (t,), bw, "sum")


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(t.data.mean(axis=axis, keepdims=keepdims))
    _add_flops(t.size)
    count = t.size // max(out.size, 1) if axis is not None else t.size

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, t.shape),)

    return _record(out, (t,), bw, "mean")


def reshape(t: Tensor, shape) -> Tensor:
    out = t.data.reshape(shape)
    return _record(out, (t,), lambda g: (g.reshape(t.shape),), "reshape")


def transpose(t: Tensor, axes=None) -> Tensor:
    axes = tuple(range(t.ndim))[::-1] if not axes else tuple(axes)
    inv = np.argsort(axes)
    out = t.data.transpose(axes)
    return _record(out, (t,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    out = np.swapaxes(t.data, a, b)
    return _record(out, (t,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, bw, "concat")


def take(t: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    out = np.take(t.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(t.data)
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(out, (t,), bw, "take")


def gather_rows(t: Tensor, indices: np.ndarray) -> Tensor:
    """``t[..., S, d]`` indexed by ``indices[..., L]`` along the row axis."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take_along_axis(t.data, idx[..., None], axis=-2)

    def bw(g):
        full = np.zeros_like(t.data)
        lead = np.indices(idx.shape)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return _record(out, (t,), bw, "gather_rows")


def reduce_argmax(t: Tensor, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Max values and first-occurrence indices along ``axis`` (constants)."""
    if t.shape[axis] == 0:
        raise ShapeError(f"argmax over empty axis {axis} of shape {t.shape}")
    idx = np.argmax(t.data, axis=axis)
    vals = np.take_along_axis(t.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    _add_flops(t.size)
    return Tensor(vals), idx


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from None
    _add_flops(2 * out.size * a.shape[-1])

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


# --------------------------------------------------------------------------
# spatial ops on single C x H x W maps
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    pad = (k - 1) // 2
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c, h, w = shape
    pad = (k - 1) // 2
    out = np.zeros((c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return out[:, pad : pad + h, pad : pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded ``k x k`` cross-correlation of a ``C x H x W`` map."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected CxHxW input and OxCxkxk weight, got {x.shape} and {weight.shape}")
    co, ci, k, k2 = weight.shape
    if ci != x.shape[0]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: unsupported kernel {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    cols, ho, wo = _im2col(x.data, k, stride)
    wmat = weight.data.reshape(co, -1)
    out = wmat @ cols
    _add_flops(2 * out.size * cols.shape[0])
    if bias is not None:
        out = out + bias.data[:, None]
        _add_flops(out.size)
    out = out.reshape(co, ho, wo)

    def bw(g):
        g2 = g.reshape(co, -1)
        gx = _col2im(wmat.T @ g2, x.shape, k, stride, ho, wo) if x.requires_grad else None
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bw, "conv2d")


def bilinear_sample(fmap: Tensor, points: Tensor) -> Tensor:
    """Sample ``fmap[C,H,W]`` at continuous ``(y, x)`` rows of ``points[P,2]``.

    Corners outside the map read as zero, so any point beyond
    ``[-1, H] x [-1, W]`` returns zero. The coordinate gradient at an exact
    lattice line is the one-sided derivative of the ``floor`` cell.
    """
    c, h, w = fmap.shape
    pts = points.data
    y, x = pts[:, 0], pts[:, 1]
    y0f, x0f = np.floor(y), np.floor(x)
    ly, lx = y - y0f, x - x0f
    y0, x0 = y0f.astype(np.int64), x0f.astype(np.int64)
    flat = fmap.data.reshape(c, h * w)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        vals = np.where(valid, flat[:, idx], 0.0)
        wy = ly if dy else 1.0 - ly
        wx = lx if dx else 1.0 - lx
        corners.append((idx, valid, vals, wy, wx, dy, dx))

    out = np.zeros((c, len(pts)))
    for idx, valid, vals, wy, wx, _, _ in corners:
        out += vals * (wy * wx)
    _add_flops(8 * out.size)

    def bw(g):
        gmap = gpts = None
        if fmap.requires_grad:
            keys, weights = [], []
            chan = np.arange(c)[:, None] * (h * w)
            for idx, valid, _, wy, wx, _, _ in corners:
                keys.append((chan + idx[None, :]).ravel())
                weights.append((g * (wy * wx * valid)).ravel())
            gmap = np.bincount(np.concatenate(keys), np.concatenate(weights), minlength=c * h * w)
            gmap = gmap.reshape(fmap.shape)
        if points.requires_grad:
            gy = np.zeros(len(pts))
            gx = np.zeros(len(pts))
            for _, _, vals, wy, wx, dy, dx in corners:
                s = (g * vals).sum(axis=0)
                gy += s * wx * (1.0 if dy else -1.0)
                gx += s * wy * (1.0 if dx else -1.0)
            gpts = np.stack([gy, gx], axis=1)
        return gmap, gpts

    return _record(out, (fmap, points), bw, "bilinear_sample")


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear weights with half-pixel centres and clamped edges."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable resize of ``[..., H, W]`` arrays."""
    mh = interp_matrix(arr.shape[-2], out_h)
    mw = interp_matrix(arr.shape[-1], out_w)
    return mh @ arr @ mw.T


def upsample_bilinear_2x(fmap: Tensor) -> Tensor:
    c, h, w = fmap.shape
    mh = interp_matrix(h, 2 * h)
    mw = interp_matrix(w, 2 * w)
    out = mh @ fmap.data @ mw.T
    _add_flops(4 * out.size)
    return _record(out, (fmap,), lambda g: (mh.T @ g @ mw,), "upsample_bilinear_2x")


def global_avg_pool(fmap: Tensor) -> Tensor:
    c, h, w = fmap.shape
    out = fmap.data.mean(axis=(1, 2), keepdims=True)
    _add_flops(fmap.size)
    return _record(out, (fmap,), lambda g: (np.broadcast_to(g / (h * w), fmap.shape),), "global_avg_pool")
