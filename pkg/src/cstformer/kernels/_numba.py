import numpy as np
from numba import njit

from ._numpy import ADPIT_PATTERNS

_JIT = dict(nogil=True, cache=True)


@njit(**_JIT)
def depthwise_conv2d_forward(xp, w, stride):
    B, C, Hp, Wp = xp.shape
    kh, kw = w.shape[2], w.shape[3]
    sh, sw = stride
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    out = np.zeros((B, C, Ho, Wo), dtype=xp.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    t = w[c, 0, i, j]
                    for h in range(Ho):
                        hi = h * sh + i
                        for q in range(Wo):
                            out[b, c, h, q] += t * xp[b, c, hi, q * sw + j]
    return out


@njit(**_JIT)
def depthwise_conv2d_backward(xp, w, grad, stride):
    B, C, Ho, Wo = grad.shape
    kh, kw = w.shape[2], w.shape[3]
    sh, sw = stride
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    t = w[c, 0, i, j]
                    acc = 0.0
                    for h in range(Ho):
                        hi = h * sh + i
                        for q in range(Wo):
                            g = grad[b, c, h, q]
                            acc += g * xp[b, c, hi, q * sw + j]
                            dxp[b, c, hi, q * sw + j] += g * t
                    dw[c, 0, i, j] += acc
    return dxp, dw


@njit(**_JIT)
def _col2im(cols, out, stride):
    B, C, kh, kw, Ho, Wo = cols.shape
    sh, sw = stride
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for h in range(Ho):
                        for q in range(Wo):
                            out[b, c, h * sh + i, q * sw + j] += cols[b, c, i, j, h, q]
    return out


def col2im(cols, padded_shape, stride):
    out = np.zeros(padded_shape, dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), out, stride)


@njit(**_JIT)
def max_pool2d_forward(x, kernel, stride):
    B, C, H, W = x.shape
    kh, kw = kernel
    sh, sw = stride
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    out = np.empty((B, C, Ho, Wo), dtype=x.dtype)
    arg = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    best = x[b, c, h * sh, q * sw]
                    bi = (h * sh) * W + q * sw
                    for i in range(kh):
                        for j in range(kw):
                            v = x[b, c, h * sh + i, q * sw + j]
                            if v > best:
                                best = v
                                bi = (h * sh + i) * W + q * sw + j
                    out[b, c, h, q] = best
                    arg[b, c, h, q] = bi
    return out, arg


@njit(**_JIT)
def _max_pool2d_backward(grad, argmax, dx):
    B, C, Ho, Wo = grad.shape
    W = dx.shape[3]
    for b in range(B):
        for c in range(C):
            for h in range(Ho):
                for q in range(Wo):
                    k = argmax[b, c, h, q]
                    dx[b, c, k // W, k % W] += grad[b, c, h, q]
    return dx


def max_pool2d_backward(grad, argmax, input_shape):
    return _max_pool2d_backward(grad, argmax, np.zeros(input_shape, dtype=grad.dtype))


@njit(**_JIT)
def _adpit_select(pred, vecs, counts, patterns):
    N, _, _, K = pred.shape
    sel = np.empty_like(pred)
    idx = np.empty((N, K), dtype=np.int64)
    for n in range(N):
        for k in range(K):
            c = counts[n, k]
            if c <= 1:
                lo, hi = 0, 1
            elif c == 2:
                lo, hi = 1, 7
            else:
                lo, hi = 7, 13
            best = np.inf
            bp = lo
            for p in range(lo, hi):
                e = 0.0
                for t in range(3):
                    src = patterns[p, t]
                    for a in range(3):
                        d = pred[n, t, a, k] - vecs[n, src, a, k]
                        e += d * d
                e /= 9.0
                if e < best:
                    best = e
                    bp = p
            idx[n, k] = bp
            for t in range(3):
                src = patterns[bp, t]
                for a in range(3):
                    sel[n, t, a, k] = vecs[n, src, a, k]
    return sel, idx


def adpit_select(pred, vecs, counts):
    return _adpit_select(
        np.ascontiguousarray(pred),
        np.ascontiguousarray(vecs),
        np.ascontiguousarray(counts, dtype=np.int64),
        ADPIT_PATTERNS,
    )
