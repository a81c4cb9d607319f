"""Dense tensors with tape-based reverse-mode autodiff on a numpy backend.

Every differentiable function records one node on the active tape; the node
stores a closure mapping the output gradient to input gradients.  Kernels are
deliberately coarse (a whole convolution or batch-norm is one node) so a
supernet step stays within a few thousand Python-level tape entries.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels

DTYPE = np.float64

_state = threading.local()


class Tape:
    """Ordered record of operations; replayed backwards by :func:`backward`."""

    def __init__(self):
        self.nodes = []

    def record(self, inputs, out, backward_fn):
        out._tape = self
        self.nodes.append((inputs, out, backward_fn))

    def clear(self):
        for _, out, _ in self.nodes:
            out._tape = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _finite_check() -> bool:
    return getattr(_state, "finite_check", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def use_tape(tape: Tape):
    """Route recording to ``tape`` for the duration of the block."""
    prev = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


def set_finite_check(enabled: bool):
    _state.finite_check = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None
        self.name = name

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
    def is_leaf(self):
        return self._tape is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=""):
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn):
    """Wrap ``data`` as an op output, recording it when any input needs grad."""
    if _finite_check() and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by a tensor op")
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Replays the tape in exact reverse order of recording, then clears it.
    """
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise RuntimeError("loss is not connected to a tape")
    grads = {id(loss): np.ones_like(loss.data)}
    touched = {}
    for inputs, out, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
                touched[id(t)] = t
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    tape.clear()
    if _finite_check():
        for t in touched.values():
            if not np.isfinite(t.grad).all():
                raise FloatingPointError(f"non-finite gradient on {t.name or 'leaf'}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def exp(x):
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x):
    xd = x.data
    if (xd <= 0).any():
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x):
    y = np.maximum(x.data, 0.0)
    return _make(y, (x,), lambda g: (g * (y > 0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), fn)


def tmean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs, axis=1):
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def getrow(x, i):
    """Row ``i`` of a 2-d tensor as a 1-d tensor."""
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _make(x.data[i].copy(), (x,), fn)


def weighted_sum(weights, xs):
    """sum_m weights[m] * xs[m]; ``weights`` is a 1-d tensor, ``xs`` same-shape tensors.

    Terms with a ``None`` entry contribute nothing (the zero operation).
    Terms with an exactly-zero weight are left out of the forward sum, so a
    one-hot weight vector returns the selected term bitwise.
    """
    w = weights.data
    live = [(m, x) for m, x in enumerate(xs) if x is not None]
    if not live:
        raise ValueError("weighted_sum needs at least one non-zero term")
    out = None
    for m, x in live:
        if w[m] == 0.0:
            continue
        term = x.data.copy() if w[m] == 1.0 else w[m] * x.data
        out = term if out is None else out + term
    if out is None:
        out = np.zeros_like(live[0][1].data)
    inputs = (weights,) + tuple(x for _, x in live)

    def fn(g):
        gw = np.zeros_like(w)
        gx = []
        for m, x in live:
            gw[m] = np.vdot(g, x.data)
            gx.append(g * w[m])
        return (gw, *gx)

    return _make(out, inputs, fn)


# ------------------------------------------------------------- normalisation

def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), fn)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), fn)


def cross_entropy(logits, labels, ignore_index=255):
    """Mean pixel NLL of ``logits`` (B,K,H,W) against integer ``labels`` (B,H,W).

    Returns exactly 0 (with zero gradient) when every pixel is ignored.
    """
    labels = np.asarray(labels)
    b, k, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ValueError(f"label shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label out of range [0, {k}) at {int(bad.sum())} pixels")
    n = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / n if n else 0.0

    def fn(g):
        if not n:
            return (np.zeros_like(logits.data),)
        p = e / s
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((p - onehot) * valid[:, None] * (g / n),)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), fn)


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.1, eps=1e-5):
    """Per-channel batch norm over (B,H,W); running stats updated in place."""
    xd = x.data
    b, c, h, w = xd.shape
    x3 = xd.reshape(b, c, h * w)
    if training:
        empty = np.empty(0)
        y, xhat, mu, var, inv = _kernels.bn_forward(x3, gamma.data, beta.data, empty, empty, eps)
        n = b * h * w
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        y, xhat, _, _, inv = _kernels.bn_forward(x3, gamma.data, beta.data,
                                                 running_mean, running_var, eps)

    def fn(g):
        gx, gg, gb = _kernels.bn_backward(np.ascontiguousarray(g).reshape(b, c, h * w),
                                          xhat, gamma.data, inv, training)
        return gx.reshape(xd.shape), gg, gb

    return _make(y.reshape(xd.shape), (x, gamma, beta), fn)


# ----------------------------------------------------------------- spatial

def _out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _live_taps(h, w, kh, kw, stride, padding, dilation, ho, wo):
    """(row, col) kernel offsets whose samples touch at least one real pixel.

    A tap whose sampled rows or columns all fall in the zero padding
    contributes nothing and is dropped.
    """
    def live(k, n, no):
        first = k * dilation
        last = first + stride * (no - 1)
        return not (last < padding or first >= padding + n)

    rows = [i for i in range(kh) if live(i, h, ho)]
    cols = [j for j in range(kw) if live(j, w, wo)]
    return np.array([(i, j) for i in rows for j in cols], dtype=np.int64).reshape(-1, 2)


def _pad(x, padding, value=0.0):
    if not padding:
        return x
    b, c, h, w = x.shape
    xp = np.full((b, c, h + 2 * padding, w + 2 * padding), value, dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def conv2d(x, w, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """2-d cross-correlation; ``groups`` is 1 (dense) or C (depthwise).

    ``w`` is (O, C/groups, kh, kw).  Dense convs use im2col + matmul,
    depthwise convs accumulate tap by tap.
    """
    xd, wd = x.data, w.data
    b, c, h, wi = xd.shape
    o, cg, kh, kw = wd.shape
    if groups not in (1, c) or cg * groups != c:
        raise ValueError(f"unsupported conv grouping: C={c}, weight {wd.shape}, groups={groups}")
    if groups == c and o != c and c != 1:
        raise ValueError("depthwise conv must preserve channel count")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(wi, kw, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError("convolution output would be empty")
    xp = _pad(xd, padding)
    kk = kh * kw
    if groups == 1 and kk == 1 and stride == 1 and not padding:
        cols2 = xd.reshape(b, c, h * wi)
        w2 = wd.reshape(o, c)
        y = np.matmul(w2, cols2).reshape(b, o, ho, wo)
    elif groups == 1:
        taps = _live_taps(h, wi, kh, kw, stride, padding, dilation, ho, wo)
        idx = taps[:, 0] * kw + taps[:, 1]
        cols2 = _kernels.im2col(xp, taps, stride, dilation, ho, wo).reshape(b, -1, ho * wo)
        w2 = np.ascontiguousarray(wd.reshape(o, c, kk)[:, :, idx]).reshape(o, -1)
        y = np.matmul(w2, cols2).reshape(b, o, ho, wo)
    else:
        w3 = np.ascontiguousarray(wd[:, 0])
        y = _kernels.dw_forward(xp, w3, stride, dilation, ho, wo)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def fn(g):
        if groups == 1:
            g2 = g.reshape(b, o, ho * wo)
            gw2 = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
            gcols = np.matmul(w2.T, g2)
            if kk == 1 and stride == 1 and not padding:
                gw = gw2.reshape(wd.shape)
                gx = gcols.reshape(xd.shape)
            else:
                gw = np.zeros((o, c, kk))
                gw[:, :, idx] = gw2.reshape(o, c, len(idx))
                gw = gw.reshape(wd.shape)
                gxp = _kernels.col2im(gcols.reshape(b, c, len(idx), ho, wo), taps,
                                      xp.shape[2], xp.shape[3], stride, dilation)
                gx = gxp[:, :, padding:padding + h, padding:padding + wi] if padding else gxp
        else:
            gxp, gw3 = _kernels.dw_backward(xp, w3, np.ascontiguousarray(g), stride, dilation)
            gw = gw3.reshape(wd.shape)
            gx = gxp[:, :, padding:padding + h, padding:padding + wi] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make(y, inputs, fn)


def conv_transpose2x2(x, w):
    """Stride-2, kernel-2 transposed conv: (B,C,H,W) -> (B,O,2H,2W); ``w`` is (C,O,2,2)."""
    xd, wd = x.data, w.data
    b, c, h, wi = xd.shape
    o = wd.shape[1]
    y6 = np.tensordot(xd, wd, axes=([1], [0]))            # b h w o k l
    y = np.ascontiguousarray(y6.transpose(0, 3, 1, 4, 2, 5)).reshape(b, o, 2 * h, 2 * wi)

    def fn(g):
        g6 = g.reshape(b, o, h, 2, wi, 2)
        gx = np.tensordot(g6, wd, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, g6, axes=([0, 2, 3], [0, 2, 4]))
        return np.ascontiguousarray(gx), gw

    return _make(y, (x, w), fn)


def max_pool3x3(x, stride=1):
    """3x3 max pooling with padding 1 (stride 1 preserves shape)."""
    xd = x.data
    b, c, h, wi = xd.shape
    ho, wo = _out_size(h, 3, stride, 1, 1), _out_size(wi, 3, stride, 1, 1)
    xp = _pad(xd, 1, -np.inf)
    y, arg = _kernels.maxpool_forward(xp, stride, ho, wo)

    def fn(g):
        gxp = _kernels.maxpool_backward(np.ascontiguousarray(g), arg, stride, h + 2, wi + 2)
        return (gxp[:, :, 1:1 + h, 1:1 + wi],)

    return _make(y, (x,), fn)


_MATRIX_CACHE = {}


def _interp_matrix(n_out, n_in):
    """Bilinear (half-pixel, edge-clamped) resampling matrix of shape (n_out, n_in)."""
    key = ("interp", n_out, n_in)
    if key not in _MATRIX_CACHE:
        m = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for i in range(n_out):
            src = max((i + 0.5) * scale - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n_in - 1)
            i1 = min(i0 + 1, n_in - 1)
            frac = src - i0
            m[i, i0] += 1 - frac
            m[i, i1] += frac
        _MATRIX_CACHE[key] = m
    return _MATRIX_CACHE[key]


def _pool_matrix(n_out, n_in):
    """Adaptive average pooling matrix: bin i covers [floor(i*n/k), ceil((i+1)*n/k))."""
    key = ("pool", n_out, n_in)
    if key not in _MATRIX_CACHE:
        m = np.zeros((n_out, n_in))
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = -((-(i + 1) * n_in) // n_out)
            m[i, lo:hi] = 1.0 / (hi - lo)
        _MATRIX_CACHE[key] = m
    return _MATRIX_CACHE[key]


def separable_linear(x, rows, cols):
    """y[b,c] = rows @ x[b,c] @ cols.T for fixed resampling matrices."""
    y = np.matmul(rows, np.matmul(x.data, cols.T))

    def fn(g):
        return (np.matmul(rows.T, np.matmul(g, cols)),)

    return _make(y, (x,), fn)


def resize_bilinear(x, size):
    h, w = x.shape[2:]
    if (h, w) == tuple(size):
        return separable_linear(x, np.eye(h), np.eye(w))
    return separable_linear(x, _interp_matrix(size[0], h), _interp_matrix(size[1], w))


def adaptive_avg_pool(x, k):
    h, w = x.shape[2:]
    return separable_linear(x, _pool_matrix(k, h), _pool_matrix(k, w))


# ----------------------------------------------------------------- checking

def numerical_gradient(f, array, eps=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))
