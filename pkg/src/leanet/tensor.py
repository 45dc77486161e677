"""Dense tensors with reverse-mode automatic differentiation.

Images are laid out channels-last. Every spatial op accepts either a single
``H x W x C`` tensor or a batch ``N x H x W x C``; the batch axis is added and
removed transparently. Data defaults to float32; float64 inputs stay float64
so finite-difference checks can run at full precision.
"""
import logging
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
BN_EPS = 1e-5


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A value grid plus an optional node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _parents=(), _backward=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise(self, other, "add")

    __radd__ = __add__

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return elementwise(self, -_wrap(other, self.dtype), "add")

    def __rsub__(self, other):
        return elementwise(_wrap(other, self.dtype), -self, "add")

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


def _wrap(x, dtype=np.float32):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    """Create a result tensor; it joins the graph only if some parent needs gradients."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _toposort(root):
    order, seen = [], set()
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


def backward(loss):
    """Back-propagate from a scalar ``loss``.

    Gradients are recomputed from scratch on every call (never accumulated
    across calls). Returns a table mapping each leaf that requires gradients
    to its gradient array; the same arrays are stored on ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}", module="tensor")
    if not loss.requires_grad:
        return {}
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    table = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        if not node._parents:
            node.grad = g
            table[node] = g
            continue
        node.grad = None
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return table


def _batched(x):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected H x W x C or N x H x W x C, got shape {x.shape}")


def _unbatch(arr, squeeze):
    return arr[0] if squeeze else arr


def _rebatch(g, squeeze):
    return g[None] if squeeze else g


def channel_sum(a):
    """Per-channel (last axis) sum with float64 accumulation.

    float32 inputs are summed in fixed-size chunks by BLAS and the partials
    are combined in float64, which is far faster than a strided float64 reduce.
    """
    c = a.shape[-1]
    a2 = a.reshape(-1, c)
    if a2.dtype != np.float32:
        return a2.sum(axis=0, dtype=np.float64)
    m = a2.shape[0]
    chunk = math.gcd(m, 256)
    if chunk < 8:
        return a2.sum(axis=0, dtype=np.float64)
    partial = np.ones(chunk, np.float32) @ np.ascontiguousarray(a2).reshape(chunk, -1)
    return partial.reshape(-1, c).sum(axis=0, dtype=np.float64)


def out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- convolution


def _im2col(xp, k, stride, ho, wo):
    """Window view of a padded NHWC array as ``N x Ho x Wo x C x k x k`` (contiguous copy)."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win)


def _col2im(dcols, shape, k, stride, ho, wo):
    dxp = np.zeros(shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride, :] += dcols[..., i, j]
    return dxp


def _im2col_cf(xd, k, stride, pad, ho, wo):
    """Channels-first columns ``(k*k*C) x (N*Ho*Wo)`` ordered (i, j, c).

    Copying whole ``N x Ho x Wo`` planes gives long contiguous runs, which is
    much faster than gathering NHWC windows when C is small.
    """
    n, h, w, c = xd.shape
    xt = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    xt[:, :, pad : pad + h, pad : pad + w] = xd.transpose(3, 0, 1, 2)
    cols = np.empty((k, k, c, n, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xt[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride]
    return cols.reshape(k * k * c, n * ho * wo)


def _col2im_cf(dcols, xshape, k, stride, pad, ho, wo):
    """Scatter-add channels-first columns back onto an NHWC input gradient."""
    n, h, w, c = xshape
    dcols = dcols.reshape(k, k, c, n, ho, wo)
    if stride > 1 and h * w >= 1024:
        return _col2im_by_phase(dcols, xshape, k, stride, pad, ho, wo)
    dxt = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxt[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dcols[i, j]
    return np.ascontiguousarray(dxt[:, :, pad : pad + h, pad : pad + w].transpose(1, 2, 3, 0))


def _col2im_by_phase(dcols, xshape, k, s, pad, ho, wo):
    """Strided scatter-add into one accumulator per output phase ``(y % s, x % s)``.

    Each kernel tap then adds a contiguous block instead of writing every
    ``s``-th element, which pays off on large planes. Taps are added in the
    same order as the plain scatter, so the result is bitwise identical.
    """
    n, h, w, c = xshape
    hp = -(-(h + 2 * pad) // s) + (k - 1) // s + 1
    wp = -(-(w + 2 * pad) // s) + (k - 1) // s + 1
    acc = np.zeros((s, s, c, n, hp, wp), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            acc[i % s, j % s, :, :, i // s : i // s + ho, j // s : j // s + wo] += dcols[i, j]
    full = acc.transpose(3, 4, 0, 5, 1, 2).reshape(n, hp * s, wp * s, c)
    return np.ascontiguousarray(full[:, pad : pad + h, pad : pad + w])


def _cols_matmul(cols, w2):
    """``cols.T @ w2`` for wide ``K x M`` columns, in column blocks that stay cache-resident.

    One large product with a handful of output channels runs far below peak
    in BLAS; blocks of about 64k column entries are several times faster.
    """
    k, m = cols.shape
    chunk = max(256, 65536 // k)
    out = np.empty((m, w2.shape[1]), dtype=np.result_type(cols, w2))
    for s in range(0, m, chunk):
        np.matmul(cols[:, s : s + chunk].T, w2, out=out[s : s + chunk])
    return out


def _cols_grad(cols, g2):
    """``cols @ g2`` (kernel gradient); long products are split and the partials summed in float64."""
    m = cols.shape[1]
    if m < 32768:
        return cols @ g2
    acc = np.zeros((cols.shape[0], g2.shape[1]), np.float64)
    for s in range(0, m, 4096):
        acc += cols[:, s : s + 4096] @ g2[s : s + 4096]
    return acc.astype(np.result_type(cols, g2))


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """2-D cross-correlation with a ``k x k x Cin x Cout`` kernel."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    xd, squeeze = _batched(x)
    w = kernel.data
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"kernel must be k x k x Cin x Cout, got {w.shape}")
    k, _, cin, cout = w.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"input channels do not match kernel: input {x.shape}, kernel {w.shape}")
    n, h, wd, _ = xd.shape
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {x.shape} (pad {pad})")
    ho, wo = out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad)
    w2 = w.reshape(k * k * cin, cout)
    pointwise = k == 1 and stride == 1 and pad == 0
    if pointwise:
        cols_t = xd.reshape(n * h * wd, cin)
        out = cols_t @ w2
    else:
        cols = _im2col_cf(xd, k, stride, pad, ho, wo)
        out = _cols_matmul(cols, w2)
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _back(g):
        g2 = _rebatch(g, squeeze).reshape(n * ho * wo, cout)
        gx = gw = None
        if pointwise:
            if x.requires_grad:
                gx = _unbatch((g2 @ w2.T).reshape(xd.shape), squeeze)
            if kernel.requires_grad:
                gw = (cols_t.T @ g2).reshape(w.shape)
        else:
            if x.requires_grad:
                if stride == 1 and 2 * pad <= k - 1:
                    # full correlation of the output gradient with the flipped kernel
                    gd = g2.reshape(n, ho, wo, cout)
                    wf = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
                    gcols = _im2col_cf(gd, k, 1, k - 1 - pad, h, wd)
                    gx = _unbatch(_cols_matmul(gcols, wf).reshape(xd.shape), squeeze)
                else:
                    gx = _unbatch(_col2im_cf(w2 @ g2.T, xd.shape, k, stride, pad, ho, wo), squeeze)
            if kernel.requires_grad:
                gw = _cols_grad(cols, g2).reshape(w.shape)
        if bias is None:
            return gx, gw
        gb = channel_sum(g2).astype(g.dtype) if bias.requires_grad else None
        return gx, gw, gb

    return _node(_unbatch(out, squeeze), parents, _back)


def depthwise_conv2d(x, kernel, stride=1, pad=0):
    """Per-channel convolution with a ``k x k x C`` kernel (channel multiplier 1)."""
    xd, squeeze = _batched(x)
    w = kernel.data
    k, _, c = w.shape
    if xd.shape[3] != c:
        raise ShapeError(f"input channels do not match depthwise kernel: input {x.shape}, kernel {w.shape}")
    n, h, wd, _ = xd.shape
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"kernel {k} larger than padded input {x.shape} (pad {pad})")
    ho, wo = out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    win = _im2col(xp, k, stride, ho, wo)
    wt = w.transpose(2, 0, 1)
    out = np.einsum("nhwckl,ckl->nhwc", win, wt, optimize=True)

    def _back(g):
        g = _rebatch(g, squeeze)
        gx = None
        if x.requires_grad:
            dwin = g[..., None, None] * wt
            dxp = _col2im(dwin, xp.shape, k, stride, ho, wo)
            gx = _unbatch(dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp, squeeze)
        gw = np.einsum("nhwckl,nhwc->klc", win, g, optimize=True) if kernel.requires_grad else None
        return gx, gw

    return _node(_unbatch(out, squeeze), (x, kernel), _back)


def conv2d_transpose(x, kernel, bias=None, stride=2):
    """Transposed convolution; only the non-overlapping form ``k == stride`` is supported."""
    w = kernel.data
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"kernel must be k x k x Cin x Cout, got {w.shape}")
    k, _, cin, cout = w.shape
    if k != stride:
        raise ShapeError(f"conv2d_transpose supports kernel == stride only, got kernel {k}, stride {stride}")
    xd, squeeze = _batched(x)
    if xd.shape[3] != cin:
        raise ShapeError(f"input channels do not match kernel: input {x.shape}, kernel {w.shape}")
    n, h, wd, _ = xd.shape
    w2 = w.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    x2 = xd.reshape(n * h * wd, cin)
    y = (x2 @ w2).reshape(n, h, wd, k, k, cout)
    out = np.ascontiguousarray(y.transpose(0, 1, 3, 2, 4, 5)).reshape(n, h * k, wd * k, cout)
    if bias is not None:
        out += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _back(g):
        g = _rebatch(g, squeeze)
        gy = np.ascontiguousarray(g.reshape(n, h, k, wd, k, cout).transpose(0, 1, 3, 2, 4, 5)).reshape(n * h * wd, k * k * cout)
        gx = _unbatch((gy @ w2.T).reshape(n, h, wd, cin), squeeze) if x.requires_grad else None
        gw = (x2.T @ gy).reshape(cin, k, k, cout).transpose(1, 2, 0, 3) if kernel.requires_grad else None
        if bias is None:
            return gx, gw
        gb = channel_sum(g).astype(g.dtype) if bias.requires_grad else None
        return gx, gw, gb

    return _node(_unbatch(out, squeeze), parents, _back)


def dense(x, weight, bias=None):
    """``x @ weight + bias`` for ``x`` of shape ``N x Fin``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0, dtype=np.float64).astype(g.dtype) if bias.requires_grad else None)

    return _node(out, parents, _back)


# -------------------------------------------------------------- normalization


class BatchNormState:
    """Running statistics of one batch-normalization layer."""

    def __init__(self, channels, momentum=0.1):
        self.channels = channels
        self.momentum = momentum
        self.mean = None
        self.var = None

    @property
    def initialized(self):
        return self.mean is not None


def _channel_rows(a, c):
    """View ``a`` as rows holding ``rep`` consecutive channel groups, plus ``rep``.

    Broadcasting a length-``c`` vector over the last axis runs an inner loop
    of only ``c`` elements; tiling the vector ``rep`` times across a longer
    row keeps elementwise kernels vectorized.
    """
    m = a.size // c
    rep = math.gcd(m, max(1, 512 // c))
    return a.reshape(-1, c * rep), rep


def batchnorm(x, gamma, beta, state, train=True, eps=BN_EPS):
    """Per-channel normalization over batch and spatial axes, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters {gamma.shape}/{beta.shape} do not match input channels {x.shape}")
    xd = x.data
    dt = xd.dtype
    count = xd.size // c
    x2, rep = _channel_rows(xd, c)
    tile = lambda v: np.tile(np.asarray(v, dtype=dt), rep)
    if train:
        mean = channel_sum(xd) / count
        centered = x2 - tile(mean)
        var = channel_sum(np.square(centered).reshape(xd.shape)) / count
        if state is not None:
            m = state.momentum
            if state.mean is None:
                state.mean, state.var = mean.astype(dt), var.astype(dt)
            else:
                state.mean = ((1 - m) * state.mean + m * mean).astype(dt)
                state.var = ((1 - m) * state.var + m * var).astype(dt)
    else:
        if state is None or not state.initialized:
            raise ValidationError("uninitialized running statistics", module="tensor")
        mean, var = state.mean, state.var
        centered = x2 - tile(mean)
    inv64 = 1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    a = (gamma.data * inv64).astype(dt)
    out = centered * tile(a)
    out += tile(beta.data)

    def _back(g):
        g2 = g.reshape(x2.shape)
        sum_g = channel_sum(g)
        sum_gc = channel_sum((g2 * centered).reshape(xd.shape))
        gg = (sum_gc * inv64).astype(g.dtype) if gamma.requires_grad else None
        gb = sum_g.astype(g.dtype) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = g2 * tile(a)
            if train:
                gx -= centered * tile(a * inv64 * inv64 * sum_gc / count)
                gx -= tile(a * sum_g / count)
            gx = gx.reshape(xd.shape)
        return gx, gg, gb

    return _node(out.reshape(xd.shape), (x, gamma, beta), _back)


# -------------------------------------------------------------------- pooling


def pool(x, kind, window=2):
    """Pooling. ``max``/``avg`` use non-overlapping windows that must divide the extent."""
    if kind == "channel_avg":
        c = x.shape[-1]
        if x.dtype == np.float32:
            out = (x.data.reshape(-1, c) @ np.full(c, 1.0 / c, np.float32)).reshape(x.shape[:-1] + (1,))
        else:
            out = x.data.mean(axis=-1, keepdims=True)

        def _back(g):
            return (np.repeat(g * g.dtype.type(1.0 / c), c, axis=-1),)

        return _node(out, (x,), _back)

    xd, squeeze = _batched(x)
    n, h, w, c = xd.shape
    if kind == "global_avg":
        out = xd.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(xd.dtype)

        def _back(g):
            g = _rebatch(g, squeeze)
            return (_unbatch(np.broadcast_to(g / (h * w), xd.shape).astype(g.dtype), squeeze),)

        return _node(_unbatch(out, squeeze), (x,), _back)

    if kind not in ("max", "avg"):
        raise ValidationError(f"unknown pool kind {kind!r}", module="tensor")
    if window < 1 or window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial extent of {x.shape}")
    if h % window or w % window:
        raise ShapeError(f"pool window {window} must divide spatial extent of {x.shape}")
    ho, wo = h // window, w // window
    blocks = xd.reshape(n, ho, window, wo, window, c)
    if kind == "avg":
        out = blocks.mean(axis=(2, 4), dtype=np.float64).astype(xd.dtype)

        def _back(g):
            g = _rebatch(g, squeeze) / (window * window)
            gx = np.broadcast_to(g[:, :, None, :, None, :], blocks.shape).reshape(xd.shape)
            return (_unbatch(np.ascontiguousarray(gx), squeeze),)

        return _node(_unbatch(out, squeeze), (x,), _back)

    flat = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _back(g):
        g = _rebatch(g, squeeze)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3).reshape(xd.shape)
        return (_unbatch(gx, squeeze),)

    return _node(_unbatch(out, squeeze), (x,), _back)


# ---------------------------------------------------------------- activations


def sigmoid_array(z):
    """Numerically stable logistic function; the result is clamped to stay strictly inside (0, 1)."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)


def activate(x, kind, alpha=0.2):
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0)

        def _back(g):
            return (g * (out > 0),)

    elif kind == "leaky_relu":
        slope = np.where(xd > 0, 1.0, alpha).astype(xd.dtype)
        out = xd * slope

        def _back(g):
            return (g * slope,)

    elif kind == "sigmoid":
        out = sigmoid_array(xd)

        def _back(g):
            return (g * out * (1 - out),)

    elif kind in ("linear", "none"):
        return x
    else:
        raise ValidationError(f"unknown activation {kind!r}", module="tensor")
    return _node(out, (x,), _back)


# ---------------------------------------------------------------- elementwise


def _reduce_to(g, shape):
    """Sum ``g`` down to ``shape`` over broadcast axes."""
    if g.shape == shape:
        return g
    if len(shape) == g.ndim and shape[:-1] == g.shape[:-1] and shape[-1] == 1 and g.dtype == np.float32:
        # single-channel broadcast: short contiguous sums, done by BLAS
        return (g.reshape(-1, g.shape[-1]) @ np.ones(g.shape[-1], g.dtype)).reshape(shape)
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1)
    r = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    if lead:
        r = r.reshape(r.shape[lead:])
    return r.reshape(shape).astype(g.dtype)


def elementwise(a, b, kind):
    """Elementwise ``add``/``mul`` with broadcasting; gradients are summed over broadcast axes."""
    a, b = _wrap(a), _wrap(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes for {kind}: {a.shape} and {b.shape}") from None
    if kind == "add":
        out = a.data + b.data

        def _back(g):
            return (
                _reduce_to(g, a.shape) if a.requires_grad else None,
                _reduce_to(g, b.shape) if b.requires_grad else None,
            )

    elif kind == "mul":
        out = a.data * b.data

        def _back(g):
            return (
                _reduce_to(g * b.data, a.shape) if a.requires_grad else None,
                _reduce_to(g * a.data, b.shape) if b.requires_grad else None,
            )

    else:
        raise ValidationError(f"unknown elementwise kind {kind!r}", module="tensor")
    assert out.shape == out_shape
    return _node(out, (a, b), _back)


def scale(x, factor):
    out = x.data * x.data.dtype.type(factor)

    def _back(g):
        return (g * g.dtype.type(factor),)

    return _node(out, (x,), _back)


def add_scalar(x, value):
    out = x.data + x.data.dtype.type(value)
    return _node(out, (x,), lambda g: (g,))


# -------------------------------------------------------------- shape helpers


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tuple(tensors), _back)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x):
    """Collapse everything but the leading batch axis."""
    return reshape(x, (x.shape[0], -1))


def shortcut(x, stride, channels):
    """Parameter-free residual shortcut: strided subsampling plus zero channel padding."""
    xd, squeeze = _batched(x)
    c = xd.shape[3]
    if channels < c:
        raise ShapeError(f"shortcut cannot reduce channels {c} -> {channels}")
    sub = xd[:, ::stride, ::stride, :]
    out = np.concatenate([sub, np.zeros(sub.shape[:3] + (channels - c,), dtype=xd.dtype)], axis=3) if channels > c else sub

    def _back(g):
        g = _rebatch(g, squeeze)
        gx = np.zeros_like(xd)
        gx[:, ::stride, ::stride, :] = g[..., :c]
        return (_unbatch(gx, squeeze),)

    return _node(_unbatch(np.ascontiguousarray(out), squeeze), (x,), _back)


def reduce_sum(x):
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _node(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def reduce_mean(x):
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _node(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


# --------------------------------------------------------------------- losses


def bce(pred, label):
    """Mean binary cross-entropy over every element of ``pred``.

    ``label`` is a scalar or an array broadcastable to ``pred``. Predictions
    are clamped to ``[1e-7, 1 - 1e-7]``; values outside ``[0, 1]`` are rejected.
    """
    p = pred.data
    if not np.all(np.isfinite(p)) or p.min() < 0 or p.max() > 1:
        raise ValidationError("bce predictions must lie in [0, 1]", module="tensor")
    y = np.broadcast_to(np.asarray(label, dtype=p.dtype), p.shape)
    if np.any((y != 0) & (y != 1)):
        raise ValidationError("bce labels must be 0 or 1", module="tensor")
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    terms = -(y * np.log(pc.astype(np.float64)) + (1 - y) * np.log1p(-pc.astype(np.float64)))
    out = np.asarray(terms.mean(), dtype=p.dtype)
    n = p.size
    inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)

    def _back(g):
        d = (-(y / pc) + (1 - y) / (1 - pc)) / n
        return ((g * d * inside).astype(p.dtype),)

    return _node(out, (pred,), _back)


def mae(pred, target):
    """Mean absolute error against a constant target array."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mae shape mismatch: prediction {pred.shape}, target {t.shape}")
    diff = pred.data - t
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype)
    n = diff.size

    def _back(g):
        return ((g * np.sign(diff) / n).astype(pred.dtype),)

    return _node(out, (pred,), _back)


# ------------------------------------------------------------- initialization


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)
