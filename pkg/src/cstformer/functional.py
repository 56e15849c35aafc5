"""Differentiable neural-network primitives built on :mod:`cstformer.tensor`."""
import math

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_node, matmul, permute, reshape


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _out_extent(n, k, s, p, dim):
    span = n + 2 * p - k
    if span < 0:
        raise ShapeError(f"kernel extent {k} exceeds padded {dim} extent {n + 2 * p}")
    return span // s + 1


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _unpad(x, ph, pw):
    H, W = x.shape[2], x.shape[3]
    return x[:, :, ph:H - ph, pw:W - pw]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation. ``x``: (B, Cin, H, W); ``weight``: (Cout, Cin, kh, kw)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (B, C, H, W), got shape {x.shape}")
    B, Cin, H, W = x.shape
    Cout, wc, kh, kw = weight.shape
    if wc != Cin:
        raise ShapeError(f"conv2d input channels: input has {Cin}, weight expects {wc}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError("conv2d stride must be >= 1")
    Ho = _out_extent(H, kh, sh, ph, "height")
    Wo = _out_extent(W, kw, sw, pw, "width")
    xd, wd = x.data, weight.data
    wm = wd.reshape(Cout, -1)
    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    if pointwise:
        cols = xd.reshape(B, Cin, H * W)
    else:
        xp = _pad(xd, ph, pw)
        cols = np.empty((B, Cin, kh, kw, Ho, Wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]
        cols = cols.reshape(B, Cin * kh * kw, Ho * Wo)
    out = np.matmul(wm, cols).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)

    def backward(g):
        g2 = g.reshape(B, Cout, Ho * Wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        dcols = np.matmul(wm.T, g2)
        if pointwise:
            gx = dcols.reshape(B, Cin, H, W)
        else:
            dcols = dcols.reshape(B, Cin, kh, kw, Ho, Wo)
            gx = _unpad(kernels.col2im(dcols, (B, Cin, H + 2 * ph, W + 2 * pw), (sh, sw)), ph, pw)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def depthwise_conv2d(x, weight, bias=None, stride=1, padding=0):
    """Per-channel convolution (groups = C). ``weight``: (C, 1, kh, kw)."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d input must be 4-d, got shape {x.shape}")
    B, C, H, W = x.shape
    if weight.shape[0] != C or weight.shape[1] != 1:
        raise ShapeError(
            f"depthwise_conv2d channels: input has {C}, weight shape is {weight.shape}"
        )
    kh, kw = weight.shape[2], weight.shape[3]
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError("depthwise_conv2d stride must be >= 1")
    _out_extent(H, kh, sh, ph, "height")
    _out_extent(W, kw, sw, pw, "width")
    xp = _pad(x.data, ph, pw)
    out = kernels.depthwise_conv2d_forward(xp, weight.data, (sh, sw))
    if bias is not None:
        out += bias.data.reshape(1, C, 1, 1)

    def backward(g):
        gxp, gw = kernels.depthwise_conv2d_backward(xp, weight.data, np.ascontiguousarray(g), (sh, sw))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return _unpad(gxp, ph, pw), gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis. ``weight``: (Dout, Din)."""
    Dout, Din = weight.shape
    if x.shape[-1] != Din:
        raise ShapeError(f"linear input features: got {x.shape[-1]}, weight expects {Din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, Din)
    out = x2 @ weight.data.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, Dout)
        gx = (g2 @ weight.data).reshape(*lead, Din)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out.reshape(*lead, Dout), parents, backward)


def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), backward)


def max_pool2d(x, kernel, stride=None):
    """Max pooling; ``stride`` defaults to the kernel (non-overlapping windows)."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        return x
    B, C, H, W = x.shape
    _out_extent(H, kh, sh, 0, "height")
    _out_extent(W, kw, sw, 0, "width")
    out, arg = kernels.max_pool2d_forward(np.ascontiguousarray(x.data), (kh, kw), (sh, sw))
    shape = x.shape
    return make_node(
        out, (x,), lambda g: (kernels.max_pool2d_backward(np.ascontiguousarray(g), arg, shape),)
    )


def avg_pool2d(x, kernel, stride=None):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    if kh == 1 and kw == 1 and sh == 1 and sw == 1:
        return x
    B, C, H, W = x.shape
    Ho = _out_extent(H, kh, sh, 0, "height")
    Wo = _out_extent(W, kw, sw, 0, "width")
    xd = x.data
    out = np.zeros((B, C, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xd[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]
    n = kh * kw
    out /= n

    def backward(g):
        cols = np.broadcast_to((g / n)[:, :, None, None], (B, C, kh, kw, Ho, Wo))
        return (kernels.col2im(cols, (B, C, H, W), (sh, sw)),)

    return make_node(out, (x,), backward)


def pool2d(x, kernel, mode="max"):
    if mode == "max":
        return max_pool2d(x, kernel)
    if mode == "avg":
        return avg_pool2d(x, kernel)
    raise ConfigError(f"pooling mode must be 'max' or 'avg', got {mode!r}")


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalization over every axis except 1.

    In training mode the running buffers are updated in place (unbiased variance).
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    xd = x.data
    if training:
        n = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            dxhat_mean = (gd * g).mean(axis=axes, keepdims=True)
            proj = (gd * g * xhat).mean(axis=axes, keepdims=True)
            gx = inv.reshape(bshape) * (gd * g - dxhat_mean - xhat * proj)
        else:
            gx = g * gd * inv.reshape(bshape)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        gx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), backward)


def dropout(x, p, training, rng):
    """Inverted dropout. ``rng`` is a numpy Generator (Philox in the model)."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ConfigError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def mhsa(x, params, heads, dropout_p=0.0, training=False, rng=None, return_weights=False):
    """Multi-head scaled dot-product self-attention over axis 1 of ``x`` (N, S, E).

    ``params`` maps ``q``/``k``/``v``/``out`` to (weight, bias) pairs. No
    positional information is injected.
    """
    if x.ndim != 3:
        raise ShapeError(f"mhsa input must be (batch, seq, embed), got {x.shape}")
    N, S, E = x.shape
    if heads < 1 or E % heads:
        raise ConfigError(f"embedding dim {E} is not divisible by {heads} heads")
    d = E // heads

    def split(t):
        return permute(reshape(t, (N, S, heads, d)), (0, 2, 1, 3))

    q = split(linear(x, *params["q"]))
    k = split(linear(x, *params["k"]))
    v = split(linear(x, *params["v"]))
    scores = matmul(q, permute(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    weights = attn
    attn = dropout(attn, dropout_p, training, rng)
    ctx = reshape(permute(matmul(attn, v), (0, 2, 1, 3)), (N, S, E))
    out = linear(ctx, *params["out"])
    if return_weights:
        return out, weights
    return out
