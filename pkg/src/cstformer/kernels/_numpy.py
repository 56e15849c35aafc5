"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with an identical signature.
"""
import numpy as np

# Event-index patterns for the duplicated/permuted multi-track targets.
# Row 0 serves 0 or 1 events, rows 1-6 serve 2 events, rows 7-12 serve 3.
ADPIT_PATTERNS = np.array(
    [
        [0, 0, 0],
        [0, 0, 1], [0, 1, 0], [1, 0, 0], [0, 1, 1], [1, 0, 1], [1, 1, 0],
        [0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
    ],
    dtype=np.int64,
)
PATTERN_RANGES = ((0, 1), (0, 1), (1, 7), (7, 13))


def depthwise_conv2d_forward(xp, w, stride):
    """``xp`` is already padded; ``w`` has shape (C, 1, kh, kw)."""
    B, C, Hp, Wp = xp.shape
    kh, kw = w.shape[2], w.shape[3]
    sh, sw = stride
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    out = np.zeros((B, C, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = w[:, 0, i, j][None, :, None, None]
            out += tap * xp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]
    return out


def depthwise_conv2d_backward(xp, w, grad, stride):
    B, C, Ho, Wo = grad.shape
    kh, kw = w.shape[2], w.shape[3]
    sh, sw = stride
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            hs = slice(i, i + sh * (Ho - 1) + 1, sh)
            ws = slice(j, j + sw * (Wo - 1) + 1, sw)
            dw[:, 0, i, j] = np.einsum("bchw,bchw->c", grad, xp[:, :, hs, ws])
            dxp[:, :, hs, ws] += grad * w[:, 0, i, j][None, :, None, None]
    return dxp, dw


def col2im(cols, padded_shape, stride):
    """Scatter-add ``cols`` of shape (B, C, kh, kw, Ho, Wo) back onto a padded image."""
    B, C, kh, kw, Ho, Wo = cols.shape
    sh, sw = stride
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += cols[:, :, i, j]
    return out


def max_pool2d_forward(x, kernel, stride):
    """Returns the pooled map and the flat argmax index (into H*W) of each window."""
    B, C, H, W = x.shape
    kh, kw = kernel
    sh, sw = stride
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :Ho, :Wo].reshape(B, C, Ho, Wo, kh * kw)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * sh + local // kw
    cols = np.arange(Wo)[None, :] * sw + local % kw
    return out, (rows * W + cols).astype(np.int64)


def max_pool2d_backward(grad, argmax, input_shape):
    B, C, H, W = input_shape
    flat = argmax.reshape(B * C, -1) + (np.arange(B * C) * (H * W))[:, None]
    dx = np.bincount(flat.ravel(), weights=grad.ravel(), minlength=B * C * H * W)
    return dx.astype(grad.dtype).reshape(input_shape)


def adpit_select(pred, vecs, counts):
    """Pick the cheapest valid track assignment for every (row, class).

    pred, vecs: (N, 3, 3, K); counts: (N, K). Returns the selected target
    (N, 3, 3, K) and the chosen pattern index (N, K). Ties go to the lowest index.
    """
    cand = vecs[:, ADPIT_PATTERNS]  # (N, 13, 3, 3, K)
    err = ((pred[:, None] - cand) ** 2).mean(axis=(2, 3))  # (N, 13, K)
    valid = np.zeros((4, 13), dtype=bool)
    for n, (lo, hi) in enumerate(PATTERN_RANGES):
        valid[n, lo:hi] = True
    mask = valid[np.clip(counts, 0, 3)]  # (N, K, 13)
    err = np.where(np.moveaxis(mask, 2, 1), err, np.inf)
    idx = err.argmin(axis=1)  # (N, K)
    sel = np.take_along_axis(cand, idx[:, None, None, None, :], axis=1)[:, 0]
    return sel, idx
