"""Central finite-difference checks for the autodiff engine."""
import numpy as np

from .tensor import Tensor, mul, tsum

REL_FLOOR = 1e-6
# Some gradients are exactly zero by construction (a bias feeding a batch-norm
# in training mode, an attention key bias). Central differences there return
# pure round-off, so such coordinates are compared in absolute terms.
ZERO_ATOL = 1e-7


def relative_error(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def projection_loss(out, rng):
    """sum(out * R) for a fixed random R, so every output element carries gradient."""
    r = Tensor(rng.standard_normal(out.shape).astype(out.dtype))
    return tsum(mul(out, r))


def check_gradients(fn, inputs, eps=1e-5, max_coords=None, rng=None, grad_hook=None,
                    zero_atol=ZERO_ATOL):
    """Compare backprop against central differences.

    ``fn`` maps no arguments to a scalar Tensor built from ``inputs`` (a
    name -> Tensor mapping of float64 leaves). When ``max_coords`` is set,
    at most that many random coordinates per input are probed. ``grad_hook``
    may rewrite the analytic gradient (used as a negative control).
    Coordinates where both gradients are within ``zero_atol`` of zero count
    as agreeing; pass ``zero_atol=None`` to disable.
    Returns ``{name: max relative error}``.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs.values():
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    fn().backward()
    result = {}
    for name, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(fn().data)
            flat[c] = orig - eps
            fm = float(fn().data)
            flat[c] = orig
            numeric[i] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[coords]
        err = relative_error(a, numeric)
        if zero_atol is not None:
            err = np.where(np.maximum(np.abs(a), np.abs(numeric)) <= zero_atol, 0.0, err)
        result[name] = float(err.max())
    return result
