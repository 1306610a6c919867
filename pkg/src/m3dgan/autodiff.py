"""Reverse-mode automatic differentiation over numpy arrays.

A deliberately small tape engine: every operation returns a new
:class:`Tensor` holding the forward value and a backward closure.  Calling
:func:`backward` on a scalar walks the tape in reverse topological order
and accumulates gradients into every tensor that requires them.

Works at float32 for training and float64 for finite-difference
verification; the dtype of the inputs is preserved throughout.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the context (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-d array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy reduction scalars keep their dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # operator sugar -----------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind not in "fiu":
        raise TypeError(f"cannot wrap dtype {arr.dtype}")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _make(data, parents, backward):
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a child's grad buffer or be a read-only view
        t.grad = np.array(g)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(out):
    """Backpropagate from a scalar tensor through the recorded tape."""
    if out.data.size != 1:
        raise ValueError("backward() expects a scalar loss")
    topo = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
            # free the tape as we go; grads on leaves survive
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise arithmetic
#
# Python scalars stay scalars (no Tensor wrapping): this keeps float32
# graphs at float32 and skips needless graph nodes.


def _is_scalar(x):
    return isinstance(x, (int, float)) or (isinstance(x, np.generic) and np.ndim(x) == 0)


def _scalar_affine(a, mul_c, add_c):
    a = as_tensor(a)
    # python-float scalars: numpy scalars would re-promote float32 arrays
    mul_c = float(mul_c)
    add_c = float(add_c)
    out_data = a.data * mul_c + add_c if mul_c != 1.0 else a.data + add_c

    def bw():
        _accum(a, out.grad if mul_c == 1.0 else out.grad * mul_c)

    out = _make(out_data, (a,), bw)
    return out


def add(a, b):
    if _is_scalar(b):
        return _scalar_affine(a, 1.0, b)
    if _is_scalar(a):
        return _scalar_affine(b, 1.0, a)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def sub(a, b):
    if _is_scalar(b):
        return _scalar_affine(a, 1.0, -b)
    if _is_scalar(a):
        return _scalar_affine(b, -1.0, a)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def mul(a, b):
    if _is_scalar(b):
        return _scalar_affine(a, b, 0.0)
    if _is_scalar(a):
        return _scalar_affine(b, a, 0.0)
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def div(a, b):
    if _is_scalar(b):
        return _scalar_affine(a, 1.0 / b, 0.0)
    if _is_scalar(a):
        c = float(a)
        b = as_tensor(b)
        out_data = c / b.data

        def bw():
            _accum(b, -out.grad * c / (b.data * b.data))

        out = _make(out_data, (b,), bw)
        return out
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw():
        g = out.grad
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def neg(a):
    a = as_tensor(a)

    def bw():
        _accum(a, -out.grad)

    out = _make(-a.data, (a,), bw)
    return out


def square(a):
    a = as_tensor(a)

    def bw():
        _accum(a, out.grad * (2.0 * a.data))

    out = _make(a.data * a.data, (a,), bw)
    return out


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw():
        _accum(a, out.grad * (0.5 / out_data))

    out = _make(out_data, (a,), bw)
    return out


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw():
        _accum(a, out.grad * out_data)

    out = _make(out_data, (a,), bw)
    return out


def log(a):
    a = as_tensor(a)

    def bw():
        _accum(a, out.grad / a.data)

    out = _make(np.log(a.data), (a,), bw)
    return out


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw():
        _accum(a, out.grad * (1.0 - out_data * out_data))

    out = _make(out_data, (a,), bw)
    return out


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw():
        _accum(a, out.grad * out_data * (1.0 - out_data))

    out = _make(out_data, (a,), bw)
    return out


def softplus(a):
    """log(1 + exp(x)), computed without overflow for large |x|."""
    a = as_tensor(a)
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw():
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accum(a, out.grad * s)

    out = _make(out_data, (a,), bw)
    return out


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def bw():
        _accum(a, out.grad * mask)

    out = _make(a.data * mask, (a,), bw)
    return out


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)

    def bw():
        _accum(a, out.grad * factor)

    out = _make(a.data * factor, (a,), bw)
    return out


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.data)

    def bw():
        _accum(a, out.grad * sign)

    out = _make(np.abs(a.data), (a,), bw)
    return out


def clip(a, lo, hi):
    a = as_tensor(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def bw():
        _accum(a, out.grad * mask)

    out = _make(np.clip(a.data, lo, hi), (a,), bw)
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape))

    out = _make(out_data, (a,), bw)
    return out


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out_data.size

    def bw():
        g = out.grad
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape) / n)

    out = _make(out_data, (a,), bw)
    return out


def reshape(a, shape):
    a = as_tensor(a)

    def bw():
        _accum(a, out.grad.reshape(a.data.shape))

    out = _make(a.data.reshape(shape), (a,), bw)
    return out


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bw():
        _accum(a, out.grad.transpose(inv))

    out = _make(a.data.transpose(axes), (a,), bw)
    return out


def broadcast_to(a, shape):
    a = as_tensor(a)

    def bw():
        _accum(a, _unbroadcast(out.grad, a.data.shape))

    out = _make(np.broadcast_to(a.data, shape).copy(), (a,), bw)
    return out


def getitem(a, idx):
    a = as_tensor(a)

    def bw():
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        _accum(a, g)

    out = _make(a.data[idx], (a,), bw)
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw():
        parts = np.split(out.grad, splits, axis=axis)
        for t, g in zip(tensors, parts):
            _accum(t, g)

    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)
    return out


def flip_spatial(a):
    """Reverse the last two axes (kernel flip for transposed convolution)."""
    a = as_tensor(a)

    def bw():
        _accum(a, out.grad[..., ::-1, ::-1])

    out = _make(np.ascontiguousarray(a.data[..., ::-1, ::-1]), (a,), bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product; both operands must be at least 2-D (batch dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out_data = np.matmul(a.data, b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    out = _make(out_data, (a, b), bw)
    return out


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw():
        g = out.grad
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * s)

    out = _make(s, (a,), bw)
    return out


def embedding(weight, ids):
    """Row lookup into `weight` by an integer id array."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")

    def bw():
        g = np.zeros_like(weight.data)
        np.add.at(g, ids, out.grad)
        _accum(weight, g)

    out = _make(weight.data[ids], (weight,), bw)
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, kh, kw, sh, sw, ph, pw):
    b, c, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, sh, sw, ph, pw, oh, ow):
    b, c, h, w = x_shape
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += cols[:, :, i, j]
    if ph or pw:
        return xp[:, :, ph : ph + h, pw : pw + w]
    return xp


def conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """2-D convolution, NCHW layout, weight (out_ch, in_ch, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    bt = as_tensor(b) if b is not None else None
    bs, c, h, wd = x.data.shape
    oc, ic, kh, kw = w.data.shape
    if ic != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {ic}")
    sh, sw = stride
    ph, pw = padding
    cols, oh, ow = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    w_mat = w.data.reshape(oc, -1)
    y = np.matmul(w_mat, cols)
    if bt is not None:
        y = y + bt.data.reshape(1, oc, 1)
    y = y.reshape(bs, oc, oh, ow)
    parents = (x, w, bt) if bt is not None else (x, w)

    def bw():
        g = out.grad.reshape(bs, oc, oh * ow)
        if w.requires_grad:
            _accum(w, np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))
        if bt is not None and bt.requires_grad:
            _accum(bt, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g)
            _accum(x, _col2im(gcols, x.data.shape, kh, kw, sh, sw, ph, pw, oh, ow))

    out = _make(y, parents, bw)
    return out


def dilate2d(x, stride=(1, 1), extra=(0, 0)):
    """Insert stride-1 zeros between pixels plus `extra` trailing zeros."""
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    sh, sw = stride
    eh, ew = extra
    nh = (h - 1) * sh + 1 + eh
    nw = (w - 1) * sw + 1 + ew
    y = np.zeros((b, c, nh, nw), dtype=x.data.dtype)
    y[:, :, : (h - 1) * sh + 1 : sh, : (w - 1) * sw + 1 : sw] = x.data

    def bw():
        _accum(x, out.grad[:, :, : (h - 1) * sh + 1 : sh, : (w - 1) * sw + 1 : sw])

    out = _make(y, (x,), bw)
    return out


def conv_transpose2d(x, w, b=None, stride=(1, 1), padding=(0, 0), output_padding=(0, 0)):
    """Transposed 2-D convolution, weight (in_ch, out_ch, kh, kw).

    Built from zero-stuffing plus an ordinary convolution with the
    spatially flipped kernel, so it needs no bespoke backward pass.
    """
    x, w = as_tensor(x), as_tensor(w)
    kh, kw = w.data.shape[2], w.data.shape[3]
    ph, pw = padding
    xd = dilate2d(x, stride, output_padding)
    wf = transpose(flip_spatial(w), (1, 0, 2, 3))
    return conv2d(xd, wf, b, stride=(1, 1), padding=(kh - 1 - ph, kw - 1 - pw))
