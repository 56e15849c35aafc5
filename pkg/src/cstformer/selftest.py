"""Fast invariant checks runnable from the command line.

Each check reports its name, the tolerance it is held to and the observed
value. ``inject_fault`` names a gradient check whose analytic gradient is
scaled by 1.01 before comparison, so the harness can prove it notices.
"""
import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .gradcheck import check_gradients
from .loss import adpit_loss
from .metrics import SELDEvaluator, angular_error_matrix, match_frame, seld_score
from .model import fold_patches, unfold_patches
from .tensor import Tensor, mul, tsum

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    tolerance: float
    value: float
    passed: bool
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<28} value={self.value:.3e}  tol={self.tolerance:.0e}  ({self.seconds:.2f}s)"


def _leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _grad_case(fn, shapes, rng, hook):
    inputs = {f"in{i}": _leaf(rng, s) for i, s in enumerate(shapes)}
    args = list(inputs.values())
    r = Tensor(rng.standard_normal(fn(*args).shape))
    errs = check_gradients(lambda: tsum(mul(fn(*args), r)), inputs, max_coords=30, rng=rng,
                           grad_hook=hook)
    return max(errs.values())


def check_fold_unfold(rng, hook=None):
    worst = 0.0
    for pt, pf in [(10, 4), (5, 2), (1, 1), (50, 16)]:
        x = rng.standard_normal((2, 3, 50, 16))
        y = fold_patches(unfold_patches(Tensor(x), pt, pf), 2, 3, 50, 16, pt, pf).data
        worst = max(worst, float(np.abs(y - x).max()))
    return worst


def check_softmax(rng, hook=None):
    x = rng.standard_normal((8, 10)) * 30
    a = F.softmax(Tensor(x)).data
    b = F.softmax(Tensor(x + 1e3)).data
    return float(max(np.abs(a.sum(-1) - 1).max(), np.abs(a - b).max()))


def check_grad_conv2d(rng, hook=None):
    return _grad_case(lambda x, w, b: F.conv2d(x, w, b, 1, 1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], rng, hook)


def check_grad_depthwise(rng, hook=None):
    return _grad_case(lambda x, w: F.depthwise_conv2d(x, w, None, 1, 1), [(2, 3, 5, 4), (3, 1, 3, 3)], rng, hook)


def check_grad_mhsa(rng, hook=None):
    def fn(x, *w):
        return F.mhsa(x, {"q": (w[0], None), "k": (w[1], None), "v": (w[2], None), "out": (w[3], None)}, 2)
    return _grad_case(fn, [(2, 4, 8)] + [(8, 8)] * 4, rng, hook)


def check_grad_layer_norm(rng, hook=None):
    return _grad_case(lambda x, g, b: F.layer_norm(x, g, b), [(3, 4, 6), (6,), (6,)], rng, hook)


def check_adpit_oracle(rng, hook=None):
    worst = 0.0
    for _ in range(20):
        ev = rng.standard_normal((3, 3))
        ev /= np.linalg.norm(ev, axis=1, keepdims=True)
        pred = rng.uniform(-1, 1, (3, 3))
        brute = min(np.mean((pred - ev[list(p)]) ** 2) for p in itertools.permutations(range(3)))
        got = float(adpit_loss(Tensor(pred[None, :, :, None]), ev[None, :, :, None], np.array([[3]])).data)
        worst = max(worst, abs(got - brute))
    return worst


def _brute_match(p, r):
    if not len(p) or not len(r):
        return []
    cost = angular_error_matrix(p, r)
    n, m = len(p), len(r)
    if n <= m:
        cands = [list(zip(range(n), c)) for c in itertools.permutations(range(m), n)]
    else:
        cands = [sorted(zip(rows, range(m))) for rows in itertools.permutations(range(n), m)]
    best = min(cands, key=lambda pairs: sum(cost[a, b] for a, b in pairs))
    return [(a, b, float(cost[a, b])) for a, b in best]


def check_metric_matcher(rng, hook=None):
    mismatches = 0
    for _ in range(100):
        n, m = rng.integers(0, 4, 2)
        p = list(rng.standard_normal((n, 3)))
        r = list(rng.standard_normal((m, 3)))
        p = [v / np.linalg.norm(v) for v in p]
        r = [v / np.linalg.norm(v) for v in r]
        mismatches += match_frame(p, r) != _brute_match(p, r)
    return float(mismatches)


def check_seld_identity(rng, hook=None):
    from .features import Event
    ref = [Event(int(t), int(k), 0, float(a), 0.0)
           for t, k, a in zip(rng.integers(0, 20, 30), rng.integers(0, 4, 30), rng.integers(-180, 180, 30))]
    ref = list({(e.frame, e.cls): e for e in ref}.values())
    pred = [e._replace(azimuth=e.azimuth + float(rng.normal(0, 15))) for e in ref if rng.random() < 0.8]
    rep = SELDEvaluator(4).update(pred, ref).report()
    perfect = SELDEvaluator(4).update(ref, ref).report()
    return float(abs(rep.SELD_score - seld_score(rep.ER, rep.F, rep.LE, rep.LR)) + perfect.SELD_score)


CHECKS = [
    ("fold_unfold_roundtrip", 0.0, check_fold_unfold),
    ("softmax_normalization", 1e-12, check_softmax),
    ("grad_conv2d", GRAD_TOL, check_grad_conv2d),
    ("grad_depthwise_conv2d", GRAD_TOL, check_grad_depthwise),
    ("grad_mhsa", GRAD_TOL, check_grad_mhsa),
    ("grad_layer_norm", GRAD_TOL, check_grad_layer_norm),
    ("adpit_vs_bruteforce", 1e-12, check_adpit_oracle),
    ("matcher_vs_bruteforce", 0.0, check_metric_matcher),
    ("seld_identity", 1e-12, check_seld_identity),
]


def run_selftest(seed=0, inject_fault=None):
    """Run every check; returns a list of :class:`CheckResult`."""
    names = [n for n, _, _ in CHECKS]
    if inject_fault is not None and inject_fault not in names:
        raise ValueError(f"unknown check {inject_fault!r}; choose from {names}")
    results = []
    for i, (name, tol, fn) in enumerate(CHECKS):
        hook = (lambda _n, g: g * 1.01) if name == inject_fault else None
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        value = float(fn(rng, hook))
        results.append(CheckResult(name, tol, value, value <= tol, time.perf_counter() - t0))
    return results
