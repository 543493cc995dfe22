"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op executed while gradients are enabled appends a node
to the active :class:`Tape`. ``Tensor.backward`` walks that tape in exact
reverse order. Arrays are numpy; float32 by default, float64 inside
``default_dtype(np.float64)`` (used by the gradient checker).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Sequence

import numpy as np

from .errors import BackwardError, DegenerateBatchError, DimensionError, NonFiniteError

_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.tape = Tape()
    return _state


def get_default_dtype():
    return _st().dtype


@contextlib.contextmanager
def default_dtype(dtype):
    st = _st()
    prev, st.dtype = st.dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        st.dtype = prev


@contextlib.contextmanager
def no_grad():
    st = _st()
    prev, st.grad_enabled = st.grad_enabled, False
    try:
        yield
    finally:
        st.grad_enabled = prev


def is_grad_enabled():
    return _st().grad_enabled


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "name")

    def __init__(self, out, inputs, backward_fn, name):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, node):
        if self.consumed:
            raise BackwardError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def reset(self):
        self.nodes = []
        self.consumed = False

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise BackwardError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise BackwardError("backward() called twice without reset()")
        if not self.nodes or loss._node is None:
            raise BackwardError("nothing recorded on the tape for this loss")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    gi = _unbroadcast(gi, t.data.shape)
                if t._node is None:
                    t.grad += gi
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi


def get_tape() -> Tape:
    return _st().tape


@contextlib.contextmanager
def fresh_tape():
    """Run a block against a new, empty tape."""
    st = _st()
    prev, st.tape = st.tape, Tape()
    try:
        yield st.tape
    finally:
        st.tape = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node = None

    @classmethod
    def _wrap(cls, arr, inputs, backward_fn, name):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{name} produced non-finite values")
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out._node = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            out._node = _Node(out, inputs, backward_fn, name)
            get_tape().record(out._node)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)
        return t

    def backward(self):
        get_tape().backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, name):
    for da, db in zip(reversed(a.shape), reversed(b.shape)):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return Tensor._wrap(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return Tensor._wrap(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._wrap(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._wrap(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def relu(x):
    mask = x.data > 0
    return Tensor._wrap(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    d = x.data
    # exp of a non-positive argument only, so no overflow for any |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return Tensor._wrap(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x):
    out = np.tanh(x.data)
    return Tensor._wrap(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def tabs(x):
    s = np.sign(x.data)  # sign(0) = 0 gives the zero subgradient
    return Tensor._wrap(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def log(x):
    d = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d)  # non-positive inputs surface as NonFiniteError below
    return Tensor._wrap(out, (x,), lambda g: (g / d,), "log")


def clip(x, lo, hi):
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return Tensor._wrap(np.clip(d, lo, hi), (x,), lambda g: (g * inside,), "clip")


def gelu(x):
    """tanh approximation."""
    d = x.data
    c = np.sqrt(2.0 / np.pi).astype(d.dtype)
    inner = c * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return Tensor._wrap(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._wrap(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from e
    orig = x.shape
    return Tensor._wrap(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def permute(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._wrap(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "permute")


def transpose(x):
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError("transpose needs at least 2 dims")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def flatten_spatial(x):
    """N×C×H×W -> N×(H·W)×C, positions in row-major (h, w) order."""
    if x.ndim != 4:
        raise DimensionError(f"flatten_spatial expects N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    return reshape(permute(x, (0, 2, 3, 1)), (n, h * w, c))


def unflatten_spatial(x, h, w):
    """Inverse of :func:`flatten_spatial`."""
    n, hw, c = x.shape
    if hw != h * w:
        raise DimensionError(f"cannot unflatten {hw} positions to {h}×{w}")
    return permute(reshape(x, (n, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._wrap(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """x[..., in] @ w[in, out] + b[out]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = y + b
    return reshape(y, lead + (w.shape[1],))


def softmax_rows(x):
    """Softmax along the last axis with per-row max subtraction."""
    if x.ndim < 2:
        raise DimensionError("softmax_rows expects at least a 2-D tensor")
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._wrap(y, (x,), bw, "softmax")


# ---------------------------------------------------------------- normalization

LN_EPS = 1e-5
BN_EPS = 1e-5


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalize over the last axis, then scale and shift."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = d.shape[-1]
    red = tuple(range(d.ndim - 1))

    def bw(g):
        gxhat = g * gd
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor._wrap(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, momentum=0.1, dtype=None):
        dtype = dtype or get_default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.training = True


def batch_norm2d(x, gamma, beta, state: BatchNormState, eps=BN_EPS):
    """Per-channel normalization of an N×C×H×W tensor."""
    if x.ndim != 4:
        raise DimensionError(f"batch_norm2d expects N×C×H×W, got {x.shape}")
    d = x.data
    n_, c, h, w = d.shape
    shp = (1, c, 1, 1)
    gd = gamma.data.reshape(shp)
    if state.training:
        m = n_ * h * w
        if m < 2:
            raise DegenerateBatchError(f"batch_norm2d: {m} value per channel in training mode")
        mu = d.mean(axis=(0, 2, 3), keepdims=True)
        xc = d - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        mom = state.momentum
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mu.reshape(c)
        state.running_var[:] = (1 - mom) * state.running_var + mom * var.reshape(c) * (m / (m - 1))

        def bw(g):
            gxhat = g * gd
            gx = inv / m * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        inv = (1.0 / np.sqrt(state.running_var + eps)).reshape(shp).astype(d.dtype)
        xhat = (d - state.running_mean.reshape(shp)) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * gd + beta.data.reshape(shp)
    return Tensor._wrap(out.astype(d.dtype, copy=False), (x, gamma, beta), bw, "batch_norm2d")


# ---------------------------------------------------------------- convolution


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of N×C×H×W input with O×C×k×k weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cw}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kh}×{kw} larger than padded input {h + 2 * pad}×{wd + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # cols: (N·Ho·Wo) × (C·kh·kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(w.shape)
        gb = gm.sum(axis=0) if b is not None else None
        gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return Tensor._wrap(out, inputs, bw, "conv2d")


# ---------------------------------------------------------------- resampling


def resize_weights(n_in, n_out, dtype=np.float64):
    """Bilinear interpolation matrix (n_out × n_in), half-pixel centers."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1.0 - lam
        a[i, i1] += lam
    return a


def bilinear_resize(x, out_h, out_w):
    """Resize the last two axes of N×C×H×W; identity sizes return the input values unchanged."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target {out_h}×{out_w} must be positive")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return Tensor._wrap(x.data.copy(), (x,), lambda g: (g,), "resize")
    ah = resize_weights(h, out_h, x.dtype)
    aw = resize_weights(w, out_w, x.dtype)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return Tensor._wrap(out, (x,), bw, "resize")


def resize_array(a, out_h, out_w):
    """Plain-numpy bilinear resize of the last two axes (no tape)."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    ah = resize_weights(h, out_h, np.float64)
    aw = resize_weights(w, out_w, np.float64)
    return (ah @ a.astype(np.float64) @ aw.T).astype(a.dtype if a.dtype.kind == "f" else np.float64)


def concat(tensors: Sequence[Tensor], axis: int):
    arrs = [t.data for t in tensors]
    sizes = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._wrap(np.concatenate(arrs, axis=axis), tuple(tensors), bw, "concat")

