"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays (row-major). Every differentiable op links its
output to its inputs, forming an implicit gradient record; ``backward``
walks that record once in reverse topological order. A record is consumed
by the walk, so calling ``backward`` twice over the same graph is an error.

Double precision is used for gradient-check builds, single precision for
training/inference; ops inherit the dtype of their inputs.
"""

from contextlib import contextmanager

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, UsageError

_grad_enabled = True

# When True, every op asserts its output is finite. Slow; meant for debugging.
check_finite = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._grad_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        t = Tensor(self.data)
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _make(data, parents, grad_fn):
    """Build an op output, recording the edge only when grads are on."""
    if check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    out = Tensor(data)
    if _grad_enabled and any(isinstance(p, Tensor) and (p.requires_grad or p._grad_fn)
                             for p in parents):
        out._parents = tuple(p for p in parents if isinstance(p, Tensor))
        out._grad_fn = grad_fn
    return out


def _accum(t, g):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf of the graph.

    The walked record is consumed; a second backward over any part of it
    raises UsageError.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("gradient record already consumed; re-run the forward pass")

    topo = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                if p._consumed:
                    raise UsageError("gradient record already consumed; "
                                     "re-run the forward pass")
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            _accum(node, g)
        if node._grad_fn is not None:
            for parent, pg in node._grad_fn(g):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# elementwise ops

def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ConfigError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    # only scalar-vs-array mixing is supported
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else _as_tensor_like(b, a)
    _same_shape(a, b, "add")

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape))]

    return _make(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else _as_tensor_like(b, a)
    _same_shape(a, b, "sub")

    def grad_fn(g):
        return [(a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape))]

    return _make(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else _as_tensor_like(b, a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return [(a, _unbroadcast(g * bd, ad.shape)),
                (b, _unbroadcast(g * ad, bd.shape))]

    return _make(ad * bd, (a, b), grad_fn)


def div(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else _as_tensor_like(b, a)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return [(a, _unbroadcast(g / bd, ad.shape)),
                (b, _unbroadcast(-g * ad / (bd * bd), bd.shape))]

    return _make(ad / bd, (a, b), grad_fn)


def square(a):
    ad = a.data

    def grad_fn(g):
        return [(a, 2.0 * g * ad)]

    return _make(ad * ad, (a,), grad_fn)


def absolute(a):
    ad = a.data

    def grad_fn(g):
        return [(a, g * np.sign(ad))]

    return _make(np.abs(ad), (a,), grad_fn)


def exp(a):
    out_d = np.exp(a.data)

    def grad_fn(g):
        return [(a, g * out_d)]

    return _make(out_d, (a,), grad_fn)


def log(a):
    ad = a.data

    def grad_fn(g):
        return [(a, g / ad)]

    return _make(np.log(ad), (a,), grad_fn)


def maximum_const(a, floor):
    """Elementwise max against a constant; subgradient 1 where a > floor."""
    ad = a.data
    mask = ad > floor

    def grad_fn(g):
        return [(a, g * mask)]

    return _make(np.maximum(ad, floor), (a,), grad_fn)


def clamp(a, lo, hi):
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)

    def grad_fn(g):
        return [(a, g * mask)]

    return _make(np.clip(ad, lo, hi), (a,), grad_fn)


def leaky_relu(a, slope=0.2):
    ad = a.data
    factor = np.where(ad >= 0, 1.0, slope)

    def grad_fn(g):
        return [(a, g * factor)]

    return _make(ad * factor, (a,), grad_fn)


def sigmoid(a):
    out_d = 1.0 / (1.0 + np.exp(-a.data))

    def grad_fn(g):
        return [(a, g * out_d * (1.0 - out_d))]

    return _make(out_d, (a,), grad_fn)


def softplus(a):
    ad = a.data
    # stable: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    out_d = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    sig = 1.0 / (1.0 + np.exp(-ad))

    def grad_fn(g):
        return [(a, g * sig)]

    return _make(out_d, (a,), grad_fn)


def gaussian_cdf(a):
    """Standard normal CDF, differentiable (derivative is the normal pdf)."""
    ad = a.data
    out_d = ndtr(ad)

    def grad_fn(g):
        pdf = np.exp(-0.5 * ad * ad) / np.sqrt(2.0 * np.pi)
        return [(a, g * pdf)]

    return _make(out_d, (a,), grad_fn)


def softmax(a, axis=0):
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_d = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * out_d, axis=axis, keepdims=True)
        return [(a, out_d * (g - dot))]

    return _make(out_d, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions / shape ops

def tensor_sum(a, axis=None, keepdims=False):
    ashape = a.data.shape

    def grad_fn(g):
        if axis is None:
            return [(a, np.full(ashape, g, dtype=a.data.dtype)
                     if np.ndim(g) == 0 else np.broadcast_to(g, ashape).copy())]
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return [(a, np.broadcast_to(gg, ashape).copy())]

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a):
    n = a.data.size
    ashape = a.data.shape

    def grad_fn(g):
        return [(a, np.full(ashape, float(g) / n, dtype=a.data.dtype))]

    return _make(np.mean(a.data), (a,), grad_fn)


def reshape(a, shape):
    ashape = a.data.shape

    def grad_fn(g):
        return [(a, g.reshape(ashape))]

    return _make(a.data.reshape(shape), (a,), grad_fn)


def repeat_new_axis(a, axis, k):
    """Insert a new axis of size k by repetition; backward sums it away."""
    out_d = np.repeat(np.expand_dims(a.data, axis), k, axis=axis)

    def grad_fn(g):
        return [(a, g.sum(axis=axis))]

    return _make(out_d, (a,), grad_fn)


def narrow(a, axis, start, length):
    """Slice `length` entries along `axis` starting at `start`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    ashape = a.data.shape

    def grad_fn(g):
        out = np.zeros(ashape, dtype=g.dtype)
        out[idx] = g
        return [(a, out)]

    return _make(a.data[idx], (a,), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops on (N, C, H, W) tensors

def _require_4d(x, opname):
    if x.data.ndim != 4:
        raise ConfigError(f"{opname}: expected a 4D (N,C,H,W) tensor, "
                          f"got shape {x.data.shape}")


def _im2col(xd, kh, kw, stride, pad):
    n, c, h, w = xd.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = xd.strides
    windows = np.lib.stride_tricks.as_strided(
        xd, shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return windows.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols, xshape, kh, kw, stride, pad):
    n, c, h, w = xshape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gc[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:h + pad, pad:w + pad]
    return gx


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2D convolution (cross-correlation) on NCHW tensors."""
    _require_4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ConfigError(f"conv2d: weight must be 4D, got shape {weight.data.shape}")
    cout, cin, kh, kw = weight.data.shape
    if x.data.shape[1] != cin:
        raise ConfigError(f"conv2d: input has {x.data.shape[1]} channels but weight "
                          f"expects {cin} (input {x.data.shape}, weight {weight.data.shape})")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} pad={pad}")
    if bias is not None and bias.data.shape != (cout,):
        raise ConfigError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")

    xshape = x.data.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_d = np.matmul(wmat, cols).reshape(xshape[0], cout, oh, ow)
    if bias is not None:
        out_d = out_d + bias.data.reshape(1, cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gmat = g.reshape(g.shape[0], cout, oh * ow)
        gw = np.einsum("nco,nko->ck", gmat, cols).reshape(weight.data.shape)
        gcols = np.matmul(wmat.T, gmat)
        gx = _col2im(gcols, xshape, kh, kw, stride, pad)
        grads = [(x, gx), (weight, gw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    return _make(out_d, parents, grad_fn)


def raster_mask(kh, kw, dtype=np.float64):
    """Kernel mask zeroing the center tap and all raster-scan-future taps."""
    m = np.ones((kh, kw), dtype=dtype)
    m[kh // 2, kw // 2:] = 0.0
    m[kh // 2 + 1:, :] = 0.0
    return m


def masked_conv2d(x, weight, bias, mask, stride=1):
    """Same-padded convolution whose kernel is gated by a binary mask.

    With a raster mask, output position i depends only on input positions
    strictly before i in raster order.
    """
    cout, cin, kh, kw = weight.data.shape
    if mask.shape != (kh, kw):
        raise ConfigError(f"masked_conv2d: mask shape {mask.shape} != kernel "
                          f"spatial shape {(kh, kw)}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("masked_conv2d: kernel dims must be odd for same padding")
    mw = mul(weight, Tensor(np.broadcast_to(mask, weight.data.shape).astype(weight.dtype)))
    return conv2d(x, mw, bias, stride=stride, pad=kh // 2)


def subpixel_upsample(x, r):
    """Pixel shuffle: (N, C*r^2, H, W) -> (N, C, H*r, W*r)."""
    _require_4d(x, "subpixel_upsample")
    n, c, h, w = x.data.shape
    if c % (r * r) != 0:
        raise ConfigError(f"subpixel_upsample: {c} channels not divisible by r^2={r * r}")
    cout = c // (r * r)

    def fwd(d):
        return (d.reshape(n, cout, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, cout, h * r, w * r))

    def grad_fn(g):
        gx = (g.reshape(n, cout, h, r, w, r)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(n, c, h, w))
        return [(x, gx)]

    return _make(fwd(x.data), (x,), grad_fn)


def subpixel_downsample(xd, r):
    """Inverse pixel shuffle on a raw array (test/oracle helper)."""
    n, c, h, w = xd.shape
    assert h % r == 0 and w % r == 0
    return (xd.reshape(n, c, h // r, r, w // r, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c * r * r, h // r, w // r))


def avg_pool2(x):
    """2x2 average pooling with stride 2."""
    _require_4d(x, "avg_pool2")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ConfigError(f"avg_pool2: spatial dims must be even, got {h}x{w}")
    out_d = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def grad_fn(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return [(x, gx)]

    return _make(out_d, (x,), grad_fn)
