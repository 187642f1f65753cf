"""Minimal numpy-backed tensors with reverse-mode autodiff.

The engine records executed ops on an explicit :class:`Tape`; calling
:func:`backward` replays the records in exact reverse execution order and
accumulates gradients into the leaf tensors that asked for them. Ops only
record while a tape is active and at least one input requires a gradient,
so inference runs tape-free at plain numpy cost.

Two precision modes exist, float32 (default) and float64, selected globally
via :func:`set_precision` or the ``GCASCADE_PRECISION`` environment variable.
Mixing dtypes inside one op is an error rather than a silent promotion.
"""

import os

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}

_default_dtype = _DTYPES.get(os.environ.get("GCASCADE_PRECISION", "f32"))
if _default_dtype is None:
    raise ValueError("GCASCADE_PRECISION must be 'f32' or 'f64', got %r"
                     % os.environ.get("GCASCADE_PRECISION"))


def set_precision(name):
    """Set the global default dtype; name is 'f32' or 'f64'."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError("precision must be 'f32' or 'f64', got %r" % (name,))
    _default_dtype = _DTYPES[name]


def get_precision():
    return "f32" if _default_dtype is np.float32 else "f64"


def default_dtype():
    return _default_dtype


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``data`` is the value, ``grad`` (numpy or None) is filled by
    :func:`backward` on leaves with ``requires_grad``. Op outputs are
    marked read-only; treat every tensor as immutable once created.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor is a bug")
        arr = np.array(data, copy=True)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail(
            "item() needs a scalar tensor, got shape %s" % (self.shape,))

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype.name, self.requires_grad)

    # arithmetic sugar; scalars are python numbers, tensors must match dtype
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul_scalar(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __sub__(self, other):
        if _is_number(other):
            return add_scalar(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if _is_number(other):
            return add_scalar(mul_scalar(self, -1.0), other)
        return sub(other, self)

    def __truediv__(self, other):
        if _is_number(other):
            return mul_scalar(self, 1.0 / other)
        return div(self, other)


class Parameter(Tensor):
    """A trainable leaf; always requires a gradient."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _fail(msg):
    raise ValueError(msg)


def _is_number(x):
    return isinstance(x, (int, float, np.integer, np.floating))


# ---------------------------------------------------------------------------
# tape

class _Rec:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_TAPE_STACK = []


class Tape:
    """Execution record for one differentiable region.

    Use as a context manager around the forward pass, then hand to
    :func:`backward` together with the scalar loss.
    """

    __slots__ = ("ops",)

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must nest"
        return False

    def __len__(self):
        return len(self.ops)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out_data, inputs, bwd):
    """Wrap op output; register on the active tape when grads are wanted."""
    out_data = np.asarray(out_data)  # 0-d ops can yield array scalars
    out_data.flags.writeable = False
    tape = _active_tape()
    track = tape is not None and any(
        isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = track
    if track:
        tape.ops.append(_Rec(out, tuple(inputs), bwd))
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into .grad of every requiring leaf.

    Replays the tape strictly in reverse execution order. ``loss`` must be a
    scalar tensor produced under ``tape``.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("backward needs a scalar Tensor loss")
    produced = {id(r.out) for r in tape.ops}
    if id(loss) not in produced:
        raise ValueError("loss was not produced under this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    keep = {id(loss): loss}
    for rec in reversed(tape.ops):
        g = grads.pop(id(rec.out), None)
        keep.pop(id(rec.out), None)
        if g is None:
            continue
        contribs = rec.bwd(g)
        for inp, gi in zip(rec.inputs, contribs):
            if gi is None or not isinstance(inp, Tensor):
                continue
            if not (inp.requires_grad or id(inp) in produced):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = inp
    for key, t in keep.items():
        if t.requires_grad and id(t) not in produced:
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# shape and dtype checks

def _check_same_dtype(name, *tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError("%s: mixed dtypes %s vs %s" % (name, dt, t.data.dtype))
    return dt


def _check_4d(name, t):
    if t.data.ndim != 4:
        raise ValueError("%s expects a (n, c, h, w) tensor, got shape %s"
                         % (name, t.shape))


def _unbroadcast(g, shape):
    """Reduce gradient g back to the given input shape after numpy broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    _check_same_dtype("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a, b):
    _check_same_dtype("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a, b):
    """Elementwise (Hadamard) product; numpy broadcasting applies."""
    _check_same_dtype("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, (a, b), bwd)


def div(a, b):
    _check_same_dtype("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def add_scalar(a, s):
    s = a.data.dtype.type(s)
    out = a.data + s

    def bwd(g):
        return (g,)

    return _record(out, (a,), bwd)


def mul_scalar(a, s):
    s = a.data.dtype.type(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# activations

def relu(x):
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x):
    """tanh-approximation GELU."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _record(out.astype(xd.dtype, copy=False), (x,), bwd)


def _sigmoid_stable(xd):
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    s = _sigmoid_stable(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record(s, (x,), bwd)


def softplus(x):
    """log(1 + exp(x)) computed without overflow."""
    out = np.logaddexp(x.data.dtype.type(0), x.data)
    sig = None

    def bwd(g):
        nonlocal sig
        if sig is None:
            sig = _sigmoid_stable(x.data)
        return (g * sig,)

    return _record(out, (x,), bwd)


def softmax_channel(x):
    """Softmax over axis 1 of an (n, c, ...) tensor, max-shifted for stability."""
    xd = x.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _record(s, (x,), bwd)


def log_softmax_channel(x):
    xd = x.data
    m = xd.max(axis=1, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bwd(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions

# Below this many multiply-adds, conv2d accumulates one (channel, row, col)
# term at a time in the exact order a naive loop nest would, so tiny problems
# are bit-identical to a scalar reference. Larger problems go through
# im2col + BLAS, which reassociates sums.
EXACT_CONV_WORK = 1 << 17


def conv2d(x, w, b=None, stride=1, padding=0):
    """2D cross-correlation, x (n,ci,h,w), w (co,ci,kh,kw), optional b (co,)."""
    _check_4d("conv2d", x)
    if w.data.ndim != 4:
        raise ValueError("conv2d weight must be (co, ci, kh, kw), got %s" % (w.shape,))
    if x.shape[1] != w.shape[1]:
        raise ValueError("conv2d: input has %d channels, weight expects %d"
                         % (x.shape[1], w.shape[1]))
    tensors = (x, w) if b is None else (x, w, b)
    _check_same_dtype("conv2d", *tensors)
    n, ci, h, ww = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: kernel %dx%d does not fit input %dx%d (pad %d)"
                         % (kh, kw, h, ww, padding))
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    wd, bd = w.data, (None if b is None else b.data)

    work = n * co * ho * wo * ci * kh * kw
    if work <= EXACT_CONV_WORK:
        out = np.zeros((n, co, ho, wo), dtype=x.data.dtype)
        if bd is not None:
            out += bd[None, :, None, None]
        for c in range(ci):
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, c, i:i + stride * ho:stride, j:j + stride * wo:stride]
                    out += patch[:, None, :, :] * wd[None, :, c, i, j, None, None]
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, ci * kh * kw)
        out = (cols @ wd.reshape(co, -1).T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
        if bd is not None:
            out = out + bd[None, :, None, None]
        out = np.ascontiguousarray(out)

    def bwd(g):
        win_b = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win_b = win_b[:, :, ::stride, ::stride]
        gw = np.einsum("nohw,nchwij->ocij", g, win_b, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if bd is not None else None
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                t = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    t.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + ww] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _record(out, tensors, bwd)


def depthwise_conv2d(x, w, b=None, padding=1):
    """Per-channel 2D convolution, w (c, 1, kh, kw), stride 1.

    Only kh*kw terms per output, so the exact accumulation order (kernel row,
    then kernel col) is used unconditionally.
    """
    _check_4d("depthwise_conv2d", x)
    if w.data.ndim != 4 or w.shape[1] != 1:
        raise ValueError("depthwise weight must be (c, 1, kh, kw), got %s" % (w.shape,))
    if x.shape[1] != w.shape[0]:
        raise ValueError("depthwise_conv2d: %d channels vs weight %d"
                         % (x.shape[1], w.shape[0]))
    tensors = (x, w) if b is None else (x, w, b)
    _check_same_dtype("depthwise_conv2d", *tensors)
    n, c, h, ww = x.shape
    _, _, kh, kw = w.shape
    ho = h + 2 * padding - kh + 1
    wo = ww + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("depthwise_conv2d: kernel does not fit input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    wd, bd = w.data, (None if b is None else b.data)
    out = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    if bd is not None:
        out += bd[None, :, None, None]
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + ho, j:j + wo] * wd[None, :, 0, i, j, None, None]

    def bwd(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gw[:, 0, i, j] = (g * xp[:, :, i:i + ho, j:j + wo]).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + ho, j:j + wo] += g * wd[None, :, 0, i, j, None, None]
        gb = g.sum(axis=(0, 2, 3)) if bd is not None else None
        gx = gxp[:, :, padding:padding + h, padding:padding + ww] if padding else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _record(out, tensors, bwd)


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm2d_train(x, gamma, beta, eps=1e-5):
    """Normalize with batch statistics over (n, h, w) per channel.

    Returns (y, batch_mean, batch_var); the stats are plain numpy arrays for
    the caller's running-average update. Variance is the biased estimator.
    """
    _check_4d("batchnorm2d", x)
    _check_same_dtype("batchnorm2d", x, gamma, beta)
    xd = x.data
    mean = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return _record(out.astype(xd.dtype, copy=False), (x, gamma, beta), bwd), mean, var


def batchnorm2d_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Normalize with fixed running statistics (plain numpy arrays)."""
    _check_4d("batchnorm2d", x)
    _check_same_dtype("batchnorm2d", x, gamma, beta)
    xd = x.data
    inv = 1.0 / np.sqrt(running_var + xd.dtype.type(eps))
    xc = xd - running_mean[None, :, None, None]
    out = gamma.data[None, :, None, None] * xc * inv[None, :, None, None] \
        + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = (g * xc * inv[None, :, None, None]).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = g * (gamma.data * inv)[None, :, None, None]
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return _record(out.astype(xd.dtype, copy=False), (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# resampling and pooling

def upsample2x(x, mode="nearest"):
    """Double spatial size. 'nearest' replicates; 'bilinear' uses
    half-pixel-centered interpolation with edge clamping."""
    _check_4d("upsample2x", x)
    n, c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def bwd(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _record(out, (x,), bwd)
    if mode != "bilinear":
        raise ValueError("upsample2x mode must be 'nearest' or 'bilinear'")

    def axis_coeffs(length):
        src = (np.arange(2 * length) + 0.5) / 2.0 - 0.5
        s = np.clip(src, 0, length - 1)
        i0 = np.floor(s).astype(np.int64)
        i1 = np.minimum(i0 + 1, length - 1)
        f = (s - i0).astype(x.data.dtype)
        return i0, i1, f

    r0, r1, fr = axis_coeffs(h)
    c0, c1, fc = axis_coeffs(w)
    xd = x.data
    rows = xd[:, :, r0, :] * (1 - fr)[None, None, :, None] \
        + xd[:, :, r1, :] * fr[None, None, :, None]
    out = rows[:, :, :, c0] * (1 - fc)[None, None, None, :] \
        + rows[:, :, :, c1] * fc[None, None, None, :]

    def bwd(g):
        grows = np.zeros((n, c, 2 * h, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), c0),
                  g * (1 - fc)[None, None, None, :])
        np.add.at(grows, (slice(None), slice(None), slice(None), c1),
                  g * fc[None, None, None, :])
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), r0),
                  grows * (1 - fr)[None, None, :, None])
        np.add.at(gx, (slice(None), slice(None), r1),
                  grows * fr[None, None, :, None])
        return (gx,)

    return _record(np.ascontiguousarray(out.astype(xd.dtype, copy=False)), (x,), bwd)


def avgpool2d(x, r):
    """Non-overlapping r x r mean pooling; spatial dims must divide by r."""
    _check_4d("avgpool2d", x)
    n, c, h, w = x.shape
    if r < 1:
        raise ValueError("avgpool2d window must be >= 1")
    if h % r or w % r:
        raise ValueError("avgpool2d: %dx%d not divisible by window %d" % (h, w, r))
    if r == 1:
        return reshape(x, x.shape)
    out = x.data.reshape(n, c, h // r, r, w // r, r).mean(axis=(3, 5))
    scale = 1.0 / (r * r)

    def bwd(g):
        gs = (g * g.dtype.type(scale))[:, :, :, None, :, None]
        return (np.broadcast_to(gs, (n, c, h // r, r, w // r, r)).reshape(n, c, h, w),)

    return _record(out, (x,), bwd)


def channel_max(x):
    """Max over the channel axis, keepdims; ties go to the lowest channel."""
    _check_4d("channel_max", x)
    idx = x.data.argmax(axis=1)[:, None, :, :]
    out = np.take_along_axis(x.data, idx, axis=1)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), bwd)


def channel_avg(x):
    _check_4d("channel_avg", x)
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / c, x.data.shape).astype(g.dtype, copy=False),)

    return _record(out, (x,), bwd)


def concat_channel(xs):
    """Concatenate tensors along axis 1."""
    xs = list(xs)
    if len(xs) < 2:
        raise ValueError("concat_channel needs at least two tensors")
    _check_same_dtype("concat_channel", *xs)
    base = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != len(base) or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ValueError("concat_channel: incompatible shapes %s vs %s"
                             % (base, t.shape))
    out = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.shape[1] for t in xs]

    def bwd(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return _record(out, tuple(xs), bwd)


def reshape(x, shape):
    out = x.data.reshape(shape).copy()
    orig = x.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_axes(x, axes, keepdims=False):
    axes = tuple(ax % x.data.ndim for ax in axes)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape_kept = tuple(1 if ax in axes else d for ax, d in enumerate(x.data.shape))

    def bwd(g):
        gk = g.reshape(shape_kept) if not keepdims else g
        return (np.broadcast_to(gk, x.data.shape).astype(g.dtype, copy=False),)

    return _record(np.asarray(out), (x,), bwd)


def sum_all(x):
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, x.data.shape).astype(g.dtype, copy=False),)

    return _record(out.reshape(()), (x,), bwd)


def mean_all(x):
    n = x.data.size
    out = np.asarray(x.data.mean())

    def bwd(g):
        return (np.broadcast_to(g / n, x.data.shape).astype(g.dtype, copy=False),)

    return _record(out.reshape(()), (x,), bwd)


# ---------------------------------------------------------------------------
# graph support

def gather_nodes(x, idx):
    """Gather candidate features: x (n, c, m), idx (n, nodes, k) -> (n, c, nodes, k)."""
    if x.data.ndim != 3:
        raise ValueError("gather_nodes expects (n, c, m) features, got %s" % (x.shape,))
    if idx.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ValueError("gather_nodes: index shape %s does not match features %s"
                         % (idx.shape, x.shape))
    n, c, m = x.shape
    _, nodes, k = idx.shape
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise ValueError("gather_nodes: index out of range for %d candidates" % m)
    flat = idx.reshape(n, 1, nodes * k)
    out = np.take_along_axis(x.data, np.broadcast_to(flat, (n, c, nodes * k)), axis=2)
    out = out.reshape(n, c, nodes, k)

    def bwd(g):
        # scatter-add via bincount on a flattened (batch, channel, candidate) key
        gflat = g.reshape(n, c, nodes * k)
        offs = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * m
        keys = (offs + idx.reshape(n, 1, nodes * k)).ravel()
        gx = np.bincount(keys, weights=gflat.ravel().astype(np.float64),
                         minlength=n * c * m)
        return (gx.reshape(n, c, m).astype(g.dtype, copy=False),)

    return _record(np.ascontiguousarray(out), (x,), bwd)


def broadcast_last(x, k):
    """Materialize a trailing singleton axis as k copies."""
    if x.data.shape[-1] != 1:
        raise ValueError("broadcast_last needs a trailing axis of 1, got %s"
                         % (x.shape,))
    out = np.ascontiguousarray(np.broadcast_to(x.data, x.data.shape[:-1] + (k,)))

    def bwd(g):
        return (g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bwd)


def max_lastdim(x):
    """Max over the trailing axis; ties go to the lowest index."""
    if x.data.ndim < 2:
        raise ValueError("max_lastdim needs ndim >= 2")
    idx = x.data.argmax(axis=-1)[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), bwd)
