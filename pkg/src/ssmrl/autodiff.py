"""Minimal reverse-mode automatic differentiation over numpy arrays.

A dynamic tape of array-valued nodes, built as ops execute and consumed by
a single iterative backward pass. Deliberately small: only the operations
the rest of the package needs, each with an explicit vector-Jacobian
product. Gradients accumulate into leaf tensors' ``.grad``.

Precision is a process-wide switch (float32 default, float64 for strict
gradient checking); see :func:`set_default_dtype`.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as _sp

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (e.g. float64 gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, env stepping)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Array node in the autodiff graph.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    ``.grad`` (a plain ndarray) after :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind == "f" and arr.dtype.type is not _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        elif arr.dtype.kind in "iub":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar ----------------------------------------------------
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

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    del name  # naming lives in the module tree
    return Tensor(np.asarray(data), requires_grad=True)


def _track(*tensors) -> bool:
    return _GRAD_ENABLED and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, parents, vjp) -> Tensor:
    if _track(*parents):
        live = tuple(p for p in parents if isinstance(p, Tensor))
        return Tensor(data, requires_grad=True, _parents=live, _vjp=vjp)
    return Tensor(data)


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float):
    a = as_tensor(a)
    out = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), vjp)


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _make(out, (a,), vjp)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = _sp.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    a = as_tensor(a)
    s = _sp.expit(a.data)
    out = a.data * s

    def vjp(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (a,), vjp)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU: x * Phi(x) with the Gaussian CDF."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + _sp.erf(a.data * _INV_SQRT2))
    out = a.data * phi

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (phi + a.data * pdf),)

    return _make(out, (a,), vjp)


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    s = _sp.expit(a.data)
    return _make(out, (a,), lambda g: (g * s,))


def clamp_min(a, floor: float):
    """max(floor, a): passes gradient only where a > floor (free-bits style)."""
    a = as_tensor(a)
    mask = a.data > floor
    out = np.where(mask, a.data, floor)

    def vjp(g):
        return (g * mask,)

    return _make(out, (a,), vjp)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.shape),
            _unbroadcast(g * ~take_a, b.shape),
        )

    return _make(out, (a, b), vjp)


def where(cond: np.ndarray, a, b):
    """Select by a constant boolean/0-1 mask (mask is not differentiated)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond)
    mask = cond.astype(bool)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.shape),
        )

    return _make(out, (a, b), vjp)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def vjp(g):
        g = np.asarray(g) / n
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make(out, (a,), vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make(out, (a,), vjp)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]
    shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] += g  # basic indexing never aliases: direct add
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp)


def concat(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def stack(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _make(out, tuple(tensors), vjp)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b):
    """a @ b where a is [..., k] and b is [k, m] (2-D weights)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError(f"matmul expects 2-D rhs, got {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gb = a2.T @ g2
        return ga, gb

    return _make(out, (a, b), vjp)


# --------------------------------------------------------------------------
# fused softmax family (numerically stable, fewer graph nodes)
# --------------------------------------------------------------------------

def softmax(a, axis: int = -1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis: int = -1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


# --------------------------------------------------------------------------
# 2-D convolution (via im2col) for the vision-mode encoder/decoder
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int):
    """[B,C,H,W] -> patches [B, OH, OW, C*k*k] (copy)."""
    b, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * k * k)
    return np.ascontiguousarray(patches), oh, ow


def _col2im(cols: np.ndarray, xshape, k: int, stride: int):
    """Scatter-add patches [B, OH, OW, C*k*k] back onto [B,C,H,W]."""
    b, c, h, w = xshape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    x = np.zeros(xshape, dtype=cols.dtype)
    cols = cols.reshape(b, oh, ow, c, k, k)
    for i in range(k):
        for j in range(k):
            x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return x


def pad2d(x, p: int):
    """Zero-pad the two trailing spatial axes of [B, C, H, W] by p."""
    x = as_tensor(x)
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))

    def vjp(g):
        return (g[:, :, p:-p, p:-p],)

    return _make(out, (x,), vjp)


def conv2d(x, w, b=None, stride: int = 1):
    """x [B,C,H,W], w [Cout, Cin, k, k] valid convolution with stride."""
    x, w = as_tensor(x), as_tensor(w)
    bt = as_tensor(b) if b is not None else None
    cout, cin, k, _ = w.shape
    patches, oh, ow = _im2col(x.data, k, stride)
    wmat = w.data.reshape(cout, -1).T
    out = patches @ wmat
    if bt is not None:
        out = out + bt.data
    out = out.transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1)  # [B, OH, OW, Cout]
        gw = (
            patches.reshape(-1, cin * k * k).T @ g2.reshape(-1, cout)
        ).T.reshape(w.shape)
        gcols = g2 @ wmat.T
        gx = _col2im(gcols, x.shape, k, stride)
        grads = [gx, gw]
        if bt is not None:
            grads.append(g2.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(out, parents, vjp)


def conv_transpose2d(x, w, b=None, stride: int = 1):
    """Transposed conv: x [B,Cin,H,W], w [Cin, Cout, k, k]; output
    [(H-1)*stride + k] spatial. Adjoint of conv2d with the same stride."""
    x, w = as_tensor(x), as_tensor(w)
    bt = as_tensor(b) if b is not None else None
    cin, cout, k, _ = w.shape
    bsz, _, h, wd = x.shape
    oh = (h - 1) * stride + k
    ow = (wd - 1) * stride + k
    wmat = w.data.reshape(cin, -1)  # [Cin, Cout*k*k]
    x2 = x.data.transpose(0, 2, 3, 1)  # [B, H, W, Cin]
    cols = x2 @ wmat  # [B, H, W, Cout*k*k]
    out = _col2im(cols, (bsz, cout, oh, ow), k, stride)
    if bt is not None:
        out = out + bt.data[None, :, None, None]

    def vjp(g):
        gcols, _, _ = _im2col(g, k, stride)  # [B, H, W, Cout*k*k]
        gx = (gcols @ wmat.T).transpose(0, 3, 1, 2)
        gw = (
            x2.reshape(-1, cin).T @ gcols.reshape(-1, cout * k * k)
        ).reshape(w.shape)
        grads = [gx, gw]
        if bt is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bt is None else (x, w, bt)
    return _make(out, parents, vjp)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, wrt=None, grad=None) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into leaf ``.grad``.

    ``wrt``: optional iterable of leaf tensors; when given, only those
    leaves receive gradients (other leaves are structurally excluded, not
    just masked — their ``.grad`` stays untouched).
    """
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad (graph not recorded?)")
    if grad is None:
        grad = np.ones_like(loss.data)
    wrt_ids = None if wrt is None else {id(t) for t in wrt}

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if wrt_ids is None or id(node) in wrt_ids:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
        # release the closure and activation references early
        node._vjp = None
        node._parents = ()


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
