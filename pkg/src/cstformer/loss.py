"""Auxiliary-duplicated permutation-invariant MSE for multi-ACCDOA outputs."""
import numpy as np

from . import kernels
from .errors import CapacityError, ShapeError
from .tensor import Tensor, mean, reshape, square, sub

PATTERNS = kernels.ADPIT_PATTERNS


def _prepare(pred, vectors, counts):
    pd = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    vectors = np.asarray(vectors)
    counts = np.asarray(counts)
    K = vectors.shape[-1]
    lead = vectors.shape[:-3]
    if vectors.shape[-3:-1] != (3, 3):
        raise ShapeError(f"target vectors need (..., 3, 3, K), got {vectors.shape}")
    if pd.size != vectors.size:
        raise ShapeError(f"prediction size {pd.shape} does not match target {vectors.shape}")
    if counts.shape != lead + (K,):
        raise ShapeError(f"counts shape {counts.shape} does not match target {vectors.shape}")
    if counts.size and counts.max() > 3:
        raise CapacityError("more than 3 events in one class-frame")
    n = int(np.prod(lead))
    return n, K


def select_targets(pred, vectors, counts):
    """Cheapest valid duplicated/permuted target and its pattern index per class-frame."""
    n, K = _prepare(pred, vectors, counts)
    pd = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    p = pd.reshape(n, 3, 3, K)
    v = np.asarray(vectors, dtype=p.dtype).reshape(n, 3, 3, K)
    c = np.asarray(counts).reshape(n, K)
    return kernels.adpit_select(p, v, c)


def adpit_loss(pred, vectors, counts):
    """Scalar loss; gradient flows through the selected pattern (lowest index on ties)."""
    n, K = _prepare(pred, vectors, counts)
    sel, _ = select_targets(pred, vectors, counts)
    p = reshape(pred, (n, 3, 3, K))
    return mean(square(sub(p, Tensor(sel))))
