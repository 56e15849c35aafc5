"""Multi-ACCDOA decoding and the four SELD metrics.

Matching is done per label frame and class: predictions and references are
paired by minimum total angular error. A pair within the DoA threshold is a
true positive; a pair outside it counts once as FP and once as FN; unpaired
items are FP/FN. Error rate is aggregated over 1 s segments (10 label
frames) using S = min(FN, FP), D = FN - S, I = FP - S per segment.

Conventions for degenerate inputs:

* classes with neither references nor predictions are left out of the F and
  LR macro averages;
* if nothing is active at all, the report is (ER, F, LE, LR) = (0, 1, 0, 1);
* if events exist but no class-matched pair does, LE is reported as 180 and
  ``le_undefined`` is set;
* with no references, LR is 1 (vacuous recall) and ER counts insertions
  against a reference count of one.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .features import Event, N_CLASSES, doa_to_vector, vector_to_doa


def angular_error(u, v):
    """Angle between two unit vectors in degrees.

    Equal to arccos(clamp(u.v)) but computed as atan2(|u x v|, u.v), which
    stays exact for identical vectors where arccos loses half the digits.
    """
    return float(angular_error_matrix(u, v)[0, 0])


def angular_error_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    cross = np.linalg.norm(np.cross(a[:, None, :], b[None, :, :]), axis=-1)
    return np.degrees(np.arctan2(cross, a @ b.T))


# ------------------------------------------------------------------ decoding
@dataclass
class DecodedEvent:
    frame: int
    cls: int
    vector: np.ndarray
    confidence: float


def decode(pred, threshold=0.5, merge_deg=15.0):
    """Decode one clip's (T, 3 tracks, 3 axes, K) output into per class-frame DoAs.

    Tracks whose vector norm exceeds ``threshold`` are active. Active tracks of
    the same class-frame closer than ``merge_deg`` to an existing group's mean
    direction join that group; each group yields one event at its normalized
    mean direction.
    """
    pred = np.asarray(pred, dtype=np.float64)
    T, n_tracks, _, K = pred.shape
    norms = np.linalg.norm(pred, axis=2)  # (T, tracks, K)
    out = []
    active = np.argwhere(norms > threshold)
    by_cf = {}
    for t, trk, k in active:
        by_cf.setdefault((int(t), int(k)), []).append(int(trk))
    for (t, k) in sorted(by_cf):
        groups = []  # [sum of unit vectors, max confidence]
        for trk in sorted(by_cf[(t, k)]):
            conf = float(norms[t, trk, k])
            u = pred[t, trk, :, k] / conf
            for g in groups:
                centre = g[0] / np.linalg.norm(g[0])
                if angular_error(centre, u) < merge_deg:
                    g[0] = g[0] + u
                    g[1] = max(g[1], conf)
                    break
            else:
                groups.append([u.copy(), conf])
        for s, conf in groups:
            out.append(DecodedEvent(t, k, s / np.linalg.norm(s), conf))
    return out


def decoded_to_events(decoded, round_degrees=True):
    events = []
    track = {}
    for d in decoded:
        key = (d.frame, d.cls)
        tr = track.get(key, 0)
        track[key] = tr + 1
        az, el = vector_to_doa(d.vector)
        if round_degrees:
            az = float((int(round(az)) + 180) % 360 - 180)
            el = float(int(round(el)))
        events.append(Event(d.frame, d.cls, tr, az, el))
    return events


def decode_events(pred, threshold=0.5, merge_deg=15.0, round_degrees=True):
    return decoded_to_events(decode(pred, threshold, merge_deg), round_degrees)


# ------------------------------------------------------------------- metrics
@dataclass
class MetricsReport:
    ER: float
    F: float
    LE: float
    LR: float
    SELD_score: float
    le_undefined: bool = False
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref: int = 0
    per_class: dict = field(default_factory=dict)
    doa_threshold: float = 20.0
    segment_frames: int = 10

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self):
        flag = " (undefined: no class-matched pairs)" if self.le_undefined else ""
        return (
            f"ER {self.ER:.4f}  F {self.F:.4f}  LE {self.LE:.2f}{flag}  "
            f"LR {self.LR:.4f}  SELD {self.SELD_score:.4f}"
        )


def seld_score(er, f, le, lr):
    return (er + (1.0 - f) + le / 180.0 + (1.0 - lr)) / 4.0


def match_frame(pred_vecs, ref_vecs):
    """Minimum-total-error pairing; returns [(pred_idx, ref_idx, error_deg)]."""
    if len(pred_vecs) == 0 or len(ref_vecs) == 0:
        return []
    cost = angular_error_matrix(pred_vecs, ref_vecs)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c), float(cost[r, c])) for r, c in zip(rows, cols)]


def _group(events):
    g = {}
    for e in events:
        g.setdefault((int(e.frame), int(e.cls)), []).append(doa_to_vector(e.azimuth, e.elevation))
    return g


class SELDEvaluator:
    """Accumulates counts over clips; :meth:`report` gives the aggregate metrics."""

    def __init__(self, n_classes=N_CLASSES, doa_threshold=20.0, segment_frames=10, matcher=None):
        self.n_classes = n_classes
        self.doa_threshold = doa_threshold
        self.segment_frames = segment_frames
        self.matcher = matcher or match_frame
        K = n_classes
        self.tp = np.zeros(K, dtype=np.int64)
        self.fp = np.zeros(K, dtype=np.int64)
        self.fn = np.zeros(K, dtype=np.int64)
        self.n_ref_cls = np.zeros(K, dtype=np.int64)
        self.n_pred_cls = np.zeros(K, dtype=np.int64)
        self.matched = np.zeros(K, dtype=np.int64)
        self.le_sum = 0.0
        self.le_count = 0
        self.S = self.D = self.I = self.N = 0

    def update(self, pred_events, ref_events):
        pred = _group(pred_events)
        ref = _group(ref_events)
        seg_fn = {}
        seg_fp = {}
        seg_n = {}
        for key in sorted(set(pred) | set(ref)):
            t, k = key
            p = pred.get(key, [])
            r = ref.get(key, [])
            tp = fp = fn = 0
            pairs = self.matcher(p, r)
            for _, _, err in pairs:
                self.le_sum += err
                self.le_count += 1
                if err <= self.doa_threshold:
                    tp += 1
                else:
                    fp += 1
                    fn += 1
            fp += len(p) - len(pairs)
            fn += len(r) - len(pairs)
            self.tp[k] += tp
            self.fp[k] += fp
            self.fn[k] += fn
            self.n_ref_cls[k] += len(r)
            self.n_pred_cls[k] += len(p)
            self.matched[k] += len(pairs)
            s = t // self.segment_frames
            seg_fn[s] = seg_fn.get(s, 0) + fn
            seg_fp[s] = seg_fp.get(s, 0) + fp
            seg_n[s] = seg_n.get(s, 0) + len(r)
        for s in sorted(seg_n):
            sub = min(seg_fn[s], seg_fp[s])
            self.S += sub
            self.D += seg_fn[s] - sub
            self.I += seg_fp[s] - sub
            self.N += seg_n[s]
        return self

    def report(self):
        active = (self.n_ref_cls + self.n_pred_cls) > 0
        if not active.any():
            er, f, le, lr, undefined = 0.0, 1.0, 0.0, 1.0, False
        else:
            er = (self.S + self.D + self.I) / max(self.N, 1)
            denom = 2 * self.tp + self.fp + self.fn
            f_cls = np.where(denom > 0, 2 * self.tp / np.maximum(denom, 1), 0.0)
            f = float(f_cls[active].mean())
            has_ref = self.n_ref_cls > 0
            lr = float((self.matched[has_ref] / self.n_ref_cls[has_ref]).mean()) if has_ref.any() else 1.0
            undefined = self.le_count == 0
            le = 180.0 if undefined else self.le_sum / self.le_count
        per_class = {
            str(k): {"TP": int(self.tp[k]), "FP": int(self.fp[k]), "FN": int(self.fn[k]),
                     "n_ref": int(self.n_ref_cls[k]), "n_pred": int(self.n_pred_cls[k])}
            for k in range(self.n_classes) if active[k]
        }
        return MetricsReport(
            ER=float(er), F=float(f), LE=float(le), LR=float(lr),
            SELD_score=float(seld_score(er, f, le, lr)), le_undefined=bool(undefined),
            substitutions=int(self.S), deletions=int(self.D), insertions=int(self.I),
            n_ref=int(self.N), per_class=per_class, doa_threshold=self.doa_threshold,
            segment_frames=self.segment_frames,
        )


def evaluate(pred_events, ref_events, n_classes=N_CLASSES, doa_threshold=20.0, segment_frames=10):
    return SELDEvaluator(n_classes, doa_threshold, segment_frames).update(pred_events, ref_events).report()
