"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation allocates a fresh tensor; when an input tracks gradients the
output records its parents and a backward rule. Tensors carry monotonically
increasing node ids, so creation order is a topological order of the graph
and the backward pass sweeps the reachable nodes once, in reverse id order.

Broadcasting is restricted to singleton-dimension expansion between arrays
of equal rank (a 1-channel map scaling a C-channel feature, for instance).
Python scalars are accepted by the arithmetic ops directly.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()

DIV_EPS = 1e-12


class Tensor:
    """Immutable n-d float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_nid", "_parents", "_grad_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._nid = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph management ---------------------------------------------------

    def detach(self) -> "Tensor":
        """A leaf tensor sharing this tensor's data, outside the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._nid = next(_node_ids)
        out._parents = ()
        out._grad_fn = None
        out._backward_done = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def assign_(self, new_data: np.ndarray) -> None:
        """Replace the data of a leaf tensor (parameter update)."""
        if self._parents:
            raise ValueError("assign_ is only valid on leaf tensors")
        arr = np.array(new_data, dtype=np.float64, order="C")
        if arr.shape != self.data.shape:
            raise ValueError(f"shape mismatch in assign_: {arr.shape} vs {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr

    def backward(self) -> None:
        """Populate grad on every requires_grad tensor reachable from here.

        Requires a single-element output. Gradients accumulate (+=) across
        fan-out. A second call on the same output is an error; rebuild the
        graph instead.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a single-element output")
        if self._backward_done:
            raise RuntimeError("backward() already ran for this output; rebuild the graph")
        if not self.requires_grad:
            raise ValueError("output does not require grad; nothing to differentiate")
        self._backward_done = True

        nodes: dict[int, Tensor] = {}
        stack: list[Tensor] = [self]
        while stack:
            t = stack.pop()
            if t._nid in nodes:
                continue
            nodes[t._nid] = t
            stack.extend(t._parents)

        self.grad = np.ones(self.shape)
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            if t._grad_fn is not None and t.grad is not None:
                t._grad_fn(t.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_constant_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          grad_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.flags.writeable:
        arr.flags.writeable = False
    out.data = arr
    out.grad = None
    rq = any(p.requires_grad for p in parents)
    out.requires_grad = rq
    out._nid = next(_node_ids)
    out._parents = tuple(parents) if rq else ()
    out._grad_fn = grad_fn if rq else None
    out._backward_done = False
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.shape))
    else:
        t.grad += g


def _as_constant_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.full(ref.shape, float(value)))


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]) -> None:
    if len(sa) != len(sb):
        raise ValueError(f"rank mismatch: {sa} vs {sb} (no implicit rank promotion)")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {sa} and {sb} are not singleton-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: _accum(a, g))
    _check_broadcast(a.shape, b.shape)
    out_data = a.data + b.data

    def grad_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), grad_fn)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data - c, (a,), lambda g: _accum(a, g))
    _check_broadcast(a.shape, b.shape)
    out_data = a.data - b.data

    def grad_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: _accum(a, g * c))
    _check_broadcast(a.shape, b.shape)
    out_data = a.data * b.data

    def grad_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), grad_fn)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        if abs(c) < DIV_EPS:
            raise ValueError("division by near-zero scalar")
        inv = 1.0 / c
        return _make(a.data * inv, (a,), lambda g: _accum(a, g * inv))
    _check_broadcast(a.shape, b.shape)
    if np.min(np.abs(b.data)) < DIV_EPS:
        raise ValueError("division by near-zero element")
    out_data = a.data / b.data

    def grad_fn(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: _accum(a, g * sign))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    keep = a.data > floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: _accum(a, g * keep))


# -- reductions ---------------------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.sum(a.data), (a,), lambda g: _accum(a, np.broadcast_to(g, shape)))


def sum_axes(a: Tensor, axes: tuple[int, ...], keepdims: bool = True) -> Tensor:
    axes = tuple(ax % len(a.shape) for ax in axes)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        gk = g
        if not keepdims:
            expand = list(g.shape)
            for ax in sorted(axes):
                expand.insert(ax, 1)
            gk = g.reshape(expand)
        _accum(a, np.broadcast_to(gk, a.shape))

    return _make(out_data, (a,), grad_fn)


def mean_all(a: Tensor) -> Tensor:
    return tensor_sum(a) * (1.0 / a.size)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose2d requires a rank-2 tensor")
    return _make(a.data.T, (a,), lambda g: _accum(a, g.T))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat requires at least one part")
    rank = parts[0].data.ndim
    axis = axis % rank
    for p in parts[1:]:
        if p.data.ndim != rank:
            raise ValueError("concat parts must share rank")
        for ax in range(rank):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ValueError(f"concat extent mismatch on axis {ax}: "
                                 f"{p.shape} vs {parts[0].shape}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def grad_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * rank
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make(out_data, tuple(parts), grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    rank = a.data.ndim
    axis = axis % rank
    if not (0 <= start < stop <= a.shape[axis]):
        raise ValueError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * rank
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def grad_fn(g):
        ga = np.zeros(a.shape)
        ga[idx] = g
        _accum(a, ga)

    return _make(a.data[idx], (a,), grad_fn)


def gather_flat(a: Tensor, indices: np.ndarray) -> Tensor:
    """out[i] = a.flat[indices[i]]; backward scatter-adds into a."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= a.size):
        raise ValueError("gather index out of range")
    flat = a.data.reshape(-1)

    def grad_fn(g):
        ga = np.zeros(a.size)
        np.add.at(ga, idx, g.ravel())
        _accum(a, ga.reshape(a.shape))

    return _make(flat[idx], (a,), grad_fn)


def scatter_flat(values: Tensor, indices: np.ndarray, size: int) -> Tensor:
    """out.flat[indices] = values on a zero background; indices must be unique."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size != values.size:
        raise ValueError("scatter index count must match value count")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError("scatter index out of range")
    if np.unique(idx).size != idx.size:
        raise ValueError("scatter indices must be unique")
    out_data = np.zeros(size)
    out_data[idx] = values.data.ravel()
    vshape = values.shape

    def grad_fn(g):
        _accum(values, g.ravel()[idx].reshape(vshape))

    return _make(out_data, (values,), grad_fn)


# -- matrix product -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul requires rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def grad_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), grad_fn)


# -- activations --------------------------------------------------------------


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: _accum(a, g * factor))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    p = x >= 0
    s[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    s[~p] = ex / (1.0 + ex)

    def grad_fn(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: _accum(a, g * e))


def log(a: Tensor) -> Tensor:
    if np.min(a.data) <= 0.0:
        raise ValueError("log requires strictly positive inputs")
    x = a.data
    return _make(np.log(x), (a,), lambda g: _accum(a, g / x))


def sqrt(a: Tensor) -> Tensor:
    if np.min(a.data) <= 0.0:
        raise ValueError("sqrt requires strictly positive inputs")
    r = np.sqrt(a.data)
    return _make(r, (a,), lambda g: _accum(a, g * (0.5 / r)))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = np.empty_like(x)
    p = x >= 0
    s[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    s[~p] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: _accum(a, g * s))


def softmax(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), grad_fn)


# -- convolution --------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    ci = xp.shape[0]
    buf = np.empty((ci, kh, kw, ho, wo))
    for ky in range(kh):
        for kx in range(kw):
            buf[:, ky, kx] = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return buf.reshape(ci * kh * kw, ho * wo)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding over a [C,H,W] input."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ValueError("conv2d expects input [C,H,W] and kernels [Co,Ci,kh,kw]")
    ci, h, w = x.shape
    co, ci_k, kh, kw = kernels.shape
    if ci_k != ci:
        raise ValueError(f"kernel input channels {ci_k} do not match input {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel extents must be odd")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if bias.shape != (co,):
        raise ValueError(f"bias must have shape ({co},)")
    if (h + 2 * pad - kh) % stride != 0 or (w + 2 * pad - kw) % stride != 0:
        raise ValueError("non-integral convolution output extent")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    w2 = kernels.data.reshape(co, ci * kh * kw)
    if pad:
        xp = np.zeros((ci, h + 2 * pad, w + 2 * pad))
        xp[:, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(ci, ho * wo)
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (w2 @ cols + bias.data[:, None]).reshape(co, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(co, ho * wo)
        if kernels.requires_grad:
            _accum(kernels, (g2 @ cols.T).reshape(kernels.shape))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(ci, kh, kw, ho, wo)
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                _accum(x, dcols.reshape(ci, h, w))
                return
            dxp = np.zeros((ci, h + 2 * pad, w + 2 * pad))
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, ky:ky + stride * ho:stride,
                        kx:kx + stride * wo:stride] += dcols[:, ky, kx]
            _accum(x, dxp[:, pad:pad + h, pad:pad + w] if pad else dxp)

    return _make(out, (x, kernels, bias), grad_fn)


# -- bilinear resize ----------------------------------------------------------


@lru_cache(maxsize=256)
def _resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Dense 1-d interpolation matrix for align-corners-false sampling."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(in_size - 2, 0))
    frac = src - i0
    i1 = np.minimum(i0 + 1, in_size - 1)
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.flags.writeable = False
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a [C,H,W] tensor with align-corners-false bilinear sampling.

    Separable interpolation as two dense matrix products, so the backward
    pass is the pair of transposed products.
    """
    if x.data.ndim != 3:
        raise ValueError("bilinear_resize expects a [C,H,W] tensor")
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    c, h, w = x.shape
    mh = _resize_matrix(h, out_h)
    mw = _resize_matrix(w, out_w)
    out = mh[None] @ x.data @ mw.T

    def grad_fn(g):
        _accum(x, mh.T[None] @ g @ mw)

    return _make(out, (x,), grad_fn)


def bilinear_resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Gradient-free resize for plain arrays (same sampling as the tensor op)."""
    return bilinear_resize(Tensor(x), out_h, out_w).data


# -- verification -------------------------------------------------------------


def backward(t: Tensor) -> None:
    t.backward()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative disagreement between autodiff and central differences.

    Relative error per component is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    leaf = Tensor(x.data, requires_grad=True)
    y = f(leaf)
    if y.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    y.backward()
    g_ad = np.zeros(leaf.size) if leaf.grad is None else leaf.grad.ravel().copy()

    base = x.data.ravel()
    g_fd = np.empty(base.size)
    for i in range(base.size):
        xp = base.copy()
        xp[i] += eps
        xm = base.copy()
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        g_fd[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))
