"""Dense-array reverse-mode autodiff substrate and named parameter store.

Everything learnable in this package is built from the ops here. Tensors wrap
contiguous numpy arrays in the process-wide default dtype (float32 for
training, float64 for gradient verification); the graph is a tape of backward
closures consumed by :func:`backward`. Tensors are immutable after creation
except for their ``grad`` buffer; the optimizer swaps whole data arrays on
parameter leaves between graphs.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_STATE = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "check_finite": True,
}

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class OpError(ValueError):
    """Raised on shape mismatches or non-finite results, naming the op."""


class GraphError(RuntimeError):
    """Raised when backward() is called on an unusable graph."""


def default_dtype() -> np.dtype:
    return _STATE["dtype"]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in _ALLOWED_DTYPES:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _STATE["dtype"] = dt


@contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ("float32" or "float64")."""
    old = _STATE["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextmanager
def no_grad():
    """Disable graph recording (inference paths)."""
    old = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=_STATE["dtype"]))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._bwd = None

    @classmethod
    def _wire(cls, data: np.ndarray, parents: tuple, bwd) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        if _STATE["grad_enabled"] and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = parents
            t._bwd = bwd
        else:
            t.requires_grad = False
            t._parents = ()
            t._bwd = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, data: np.ndarray, parents: tuple, bwd) -> Tensor:
    if _STATE["check_finite"] and not np.all(np.isfinite(data)):
        raise OpError(f"{op}: non-finite values in result of shape {data.shape}")
    return Tensor._wire(data, parents, bwd)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast up from `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise OpError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _finish("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise OpError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _finish("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise OpError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _finish("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _finish("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise OpError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise OpError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad  # 1-D dot

    return _finish("matmul", out, (a, b), bwd)


def weighted_sum(weights: Tensor, vectors: Tensor) -> Tensor:
    """Reduce U x d `vectors` with a length-U weight vector to a d-vector."""
    if weights.data.ndim != 1 or vectors.data.ndim != 2 or \
            weights.shape[0] != vectors.shape[0]:
        raise OpError(f"weighted_sum: shapes {weights.shape} and {vectors.shape}")
    out = weights.data @ vectors.data
    return _finish("weighted_sum", out, (weights, vectors),
                   lambda g: (vectors.data @ g, np.outer(weights.data, g)))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _finish("concat", out, tuple(tensors), bwd)


def take(a: Tensor, idx) -> Tensor:
    """Basic slicing / integer indexing (no fancy index arrays)."""
    out = np.array(a.data[idx])  # copy; 0-d stays 0-d

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g.reshape(ga[idx].shape)
        return (ga,)

    return _finish("take", out, (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise OpError(f"transpose: expected 2-D, got {a.shape}")
    return _finish("transpose", np.ascontiguousarray(a.data.T), (a,),
                   lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _finish("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(orig),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.data.shape).copy(),)

    return _finish("sum", np.asarray(out), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a: Tensor) -> Tensor:
    if a.data.ndim != 1:
        raise OpError(f"cumsum: expected 1-D, got {a.shape}")
    return _finish("cumsum", np.cumsum(a.data), (a,),
                   lambda g: (np.cumsum(g[::-1])[::-1].copy(),))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.minimum(a.data, b.data)

    def bwd(g):
        m = a.data <= b.data  # ties route to the first argument
        return (_unbroadcast(g * m, a.shape), _unbroadcast(g * ~m, b.shape))

    return _finish("minimum", out, (a, b), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.maximum(a.data, b.data)

    def bwd(g):
        m = a.data >= b.data
        return (_unbroadcast(g * m, a.shape), _unbroadcast(g * ~m, b.shape))

    return _finish("maximum", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _finish("log", out, (a,), lambda g: (g / a.data,))


def abs_(a: Tensor) -> Tensor:
    return _finish("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable split over sign
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _finish("relu", out, (a,), lambda g: (g * (a.data > 0),))


def swish(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    out = x * s
    return _finish("swish", out.astype(x.dtype, copy=False), (a,),
                   lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    ex = np.exp(x - x.max(axis=-1, keepdims=True))
    out = ex / ex.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax", out, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; a constant row maps to the bias."""
    x = a.data
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise OpError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(x.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _finish("layer_norm", out, (a, gain, bias), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise OpError(f"embedding: ids must be 1-D, got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise OpError(f"embedding: id out of range for table {table.shape}")
    out = table.data[ids].copy()

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _finish("embedding", out, (table,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout driven by an explicit RNG stream; p=0 is the identity."""
    if p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise OpError(f"dropout: rate {p} outside [0, 1)")
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _finish("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolutions and pooling (time-major layouts)
# ---------------------------------------------------------------------------


def _windows1d(xp: np.ndarray, k: int, stride: int, t_out: int) -> np.ndarray:
    win = np.empty((t_out, k, xp.shape[1]), dtype=xp.dtype)
    for j in range(k):
        win[:, j, :] = xp[j:j + stride * t_out:stride, :]
    return win


def conv1d(a: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x (T, C_in) * w (C_out, C_in, K) + b (C_out,) -> (T_out, C_out)."""
    x = a.data
    if x.ndim != 2 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise OpError(f"conv1d: x {a.shape} vs w {w.shape}")
    c_out, c_in, k = w.shape
    xp = np.pad(x, ((padding, padding), (0, 0))) if padding else x
    t_out = (xp.shape[0] - k) // stride + 1
    if t_out < 1:
        raise OpError(f"conv1d: input T={x.shape[0]} too short for kernel {k}")
    win = _windows1d(xp, k, stride, t_out)             # (T_out, K, C_in)
    wf = w.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = win.reshape(t_out, k * c_in) @ wf.T + b.data

    def bwd(g):
        gw_flat = g.T @ win.reshape(t_out, k * c_in)
        gw = gw_flat.reshape(c_out, k, c_in).transpose(0, 2, 1)
        gwin = (g @ wf).reshape(t_out, k, c_in)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + stride * t_out:stride, :] += gwin[:, j, :]
        gx = gxp[padding:xp.shape[0] - padding, :] if padding else gxp
        return (np.ascontiguousarray(gx), gw, g.sum(axis=0))

    return _finish("conv1d", out, (a, w, b), bwd)


def depthwise_conv1d(a: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Per-channel temporal conv: x (T, C) * w (C, K) + b (C,) -> (T, C)."""
    x = a.data
    if x.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise OpError(f"depthwise_conv1d: x {a.shape} vs w {w.shape}")
    c, k = w.shape
    xp = np.pad(x, ((padding, padding), (0, 0))) if padding else x
    t_out = xp.shape[0] - k + 1
    if t_out < 1:
        raise OpError(f"depthwise_conv1d: input T={x.shape[0]} too short for kernel {k}")
    win = _windows1d(xp, k, 1, t_out)                  # (T_out, K, C)
    out = np.einsum("tkc,ck->tc", win, w.data) + b.data

    def bwd(g):
        gw = np.einsum("tc,tkc->ck", g, win)
        gwin = np.einsum("tc,ck->tkc", g, w.data)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[j:j + t_out, :] += gwin[:, j, :]
        gx = gxp[padding:xp.shape[0] - padding, :] if padding else gxp
        return (np.ascontiguousarray(gx), gw, g.sum(axis=0))

    return _finish("depthwise_conv1d", out, (a, w, b), bwd)


def conv2d(a: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x (H, W, C_in) * w (C_out, C_in, KH, KW) + b -> (H_out, W_out, C_out)."""
    x = a.data
    if x.ndim != 3 or w.data.ndim != 4 or x.shape[2] != w.shape[1]:
        raise OpError(f"conv2d: x {a.shape} vs w {w.shape}")
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    h_out = (xp.shape[0] - kh) // stride + 1
    w_out = (xp.shape[1] - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise OpError(f"conv2d: input {x.shape[:2]} too short for kernel {(kh, kw)}")
    win = np.empty((h_out, w_out, kh, kw, c_in), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            win[:, :, i, j, :] = xp[i:i + stride * h_out:stride,
                                    j:j + stride * w_out:stride, :]
    cols = win.reshape(h_out * w_out, kh * kw * c_in)
    wf = w.data.transpose(0, 2, 3, 1).reshape(c_out, kh * kw * c_in)
    out = (cols @ wf.T).reshape(h_out, w_out, c_out) + b.data

    def bwd(g):
        gf = g.reshape(h_out * w_out, c_out)
        gw = (gf.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        gwin = (gf @ wf).reshape(h_out, w_out, kh, kw, c_in)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[i:i + stride * h_out:stride,
                    j:j + stride * w_out:stride, :] += gwin[:, :, i, j, :]
        gx = gxp[padding:xp.shape[0] - padding,
                 padding:xp.shape[1] - padding, :] if padding else gxp
        return (np.ascontiguousarray(gx), gw, g.sum(axis=(0, 1)))

    return _finish("conv2d", out, (a, w, b), bwd)


def maxpool1d(a: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max over time windows; x (T, d) -> (floor((T-kernel)/stride)+1, d)."""
    x = a.data
    if x.ndim != 2:
        raise OpError(f"maxpool1d: expected 2-D, got {a.shape}")
    t_out = (x.shape[0] - kernel) // stride + 1
    if t_out < 1:
        raise OpError(f"maxpool1d: input T={x.shape[0]} shorter than kernel {kernel}")
    win = _windows1d(x, kernel, stride, t_out)         # (T_out, K, d)
    arg = win.argmax(axis=1)                           # (T_out, d)
    out = np.take_along_axis(win, arg[:, None, :], axis=1)[:, 0, :]

    def bwd(g):
        gx = np.zeros_like(x)
        cols = np.arange(x.shape[1])
        for t in range(t_out):
            np.add.at(gx, (t * stride + arg[t], cols), g[t])
        return (gx,)

    return _finish("maxpool1d", np.ascontiguousarray(out), (a,), bwd)


def custom_op(name: str, data: np.ndarray, parents: tuple, bwd) -> Tensor:
    """Wire an externally computed forward value into the graph.

    `bwd(grad_out)` must return one gradient array (or None) per parent.
    """
    return _finish(name, np.asarray(data, dtype=_STATE["dtype"]), tuple(parents), bwd)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into every reachable requires_grad leaf."""
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss is detached from any recorded graph")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coord: tuple
    n_checked: int
    passed: bool
    tol: float


def grad_check(f, point: Tensor, tol: float = 1e-4, h: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar f(point) to central differences.

    Must run under float64 (`precision("float64")`): 32-bit differences are
    dominated by rounding noise. Relative error per coordinate uses
    |a - n| / max(|a| + |n|, 1e-3) so near-zero pairs are judged absolutely.
    """
    if default_dtype() != np.dtype(np.float64):
        raise GraphError("grad_check requires the float64 mode")
    x = Tensor(point.data.copy(), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords,
                                                    replace=False)
        coords.sort()
    max_rel = 0.0
    worst = ()
    with no_grad():
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f(x).item()
            flat[c] = orig - h
            fm = f(x).item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-3)
            if rel > max_rel:
                max_rel = rel
                worst = np.unravel_index(c, x.data.shape)
    return GradCheckReport(max_rel_err=max_rel, worst_coord=tuple(int(i) for i in worst),
                           n_checked=len(coords), passed=max_rel <= tol, tol=tol)


def grad_check_params(make_loss, params: "ParamStore", tol: float = 1e-4,
                      h: float = 1e-4, max_coords_per_param: int | None = None,
                      seed: int = 0) -> dict[str, GradCheckReport]:
    """Finite-difference check of `make_loss()` against every store parameter."""
    if default_dtype() != np.dtype(np.float64):
        raise GraphError("grad_check_params requires the float64 mode")
    params.zero_grad()
    loss = make_loss()
    backward(loss)
    reports: dict[str, GradCheckReport] = {}
    rng = np.random.default_rng(seed)
    for name in params.names():
        p = params[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
            coords.sort()
        max_rel, worst = 0.0, ()
        with no_grad():
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = make_loss().item()
                flat[c] = orig - h
                fm = make_loss().item()
                flat[c] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = analytic.reshape(-1)[c]
                rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-3)
                if rel > max_rel:
                    max_rel = rel
                    worst = np.unravel_index(c, p.data.shape)
        reports[name] = GradCheckReport(max_rel_err=max_rel,
                                        worst_coord=tuple(int(i) for i in worst),
                                        n_checked=len(coords),
                                        passed=max_rel <= tol, tol=tol)
    params.zero_grad()
    return reports


# ---------------------------------------------------------------------------
# parameter store and checkpoint format
# ---------------------------------------------------------------------------


CHECKPOINT_META = "meta.json"
CHECKPOINT_BIN = "weights.bin"


class CheckpointError(ValueError):
    """Malformed checkpoint directory."""


@dataclass
class ParamStore:
    """Named parameter tensors; iteration is always lexicographic."""

    _params: dict[str, Tensor] = field(default_factory=dict)

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for _, t in self.items())

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        meta = []
        offset = 0
        chunks = []
        for name, t in self.items():
            dt = "<f8" if t.data.dtype == np.float64 else "<f4"
            raw = np.ascontiguousarray(t.data, dtype=np.dtype(dt)).tobytes()
            meta.append({"name": name, "shape": list(t.data.shape),
                         "dtype": dt, "byte_offset": offset})
            offset += len(raw)
            chunks.append(raw)
        with open(os.path.join(directory, CHECKPOINT_BIN), "wb") as fh:
            fh.write(b"".join(chunks))
        with open(os.path.join(directory, CHECKPOINT_META), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)

    @staticmethod
    def load_arrays(directory: str) -> dict[str, np.ndarray]:
        meta_path = os.path.join(directory, CHECKPOINT_META)
        bin_path = os.path.join(directory, CHECKPOINT_BIN)
        if not os.path.isfile(meta_path) or not os.path.isfile(bin_path):
            raise CheckpointError(f"not a checkpoint directory: {directory}")
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        blob = open(bin_path, "rb").read()
        out: dict[str, np.ndarray] = {}
        for entry in meta:
            dt = np.dtype(entry["dtype"])
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            start = entry["byte_offset"]
            end = start + n * dt.itemsize
            if end > len(blob):
                raise CheckpointError(f"weights.bin truncated at {entry['name']}")
            arr = np.frombuffer(blob[start:end], dtype=dt).reshape(entry["shape"])
            out[entry["name"]] = arr
        return out

    @classmethod
    def load(cls, directory: str) -> "ParamStore":
        store = cls()
        for name, arr in cls.load_arrays(directory).items():
            store.create(name, arr)
        return store
