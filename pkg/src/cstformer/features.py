"""FoA waveform -> 7-channel log-mel + intensity-vector features, and label encoding.

Channel order of FoA audio is W, Y, Z, X (ACN) with SN3D scaling. Features
are (7, T, 64): log-mel of W, Y, Z, X followed by the mel-band intensity
vector components I_x, I_y, I_z.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from . import archive
from .errors import CapacityError, ShapeError, TooShortError

SAMPLE_RATE = 24000
N_CLASSES = 13
N_TRACKS = 3
LABEL_HOP_S = 0.1


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    hop: int = 480
    win: int = 960
    n_fft: int = 1024
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 12000.0
    log_floor: float = 1e-8
    iv_eps: float = 1e-8

    @property
    def frame_hop_s(self):
        return self.hop / self.sample_rate

    @property
    def frames_per_label(self):
        return int(round(LABEL_HOP_S / self.frame_hop_s))


DEFAULT = FeatureConfig()


@dataclass
class FoaClip:
    samples: np.ndarray  # (4, N), W Y Z X
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] != 4:
            raise ShapeError(f"FoA clip needs exactly 4 channels, got shape {self.samples.shape}")

    @property
    def duration_s(self):
        return self.samples.shape[1] / self.sample_rate


class Event(NamedTuple):
    frame: int
    cls: int
    track: int
    azimuth: float
    elevation: float


@dataclass
class MultiAccdoaTarget:
    """Per label frame: 3 tracks x 3 axes x K classes plus the distinct-event count.

    A class-frame with one event stores it on all tracks; two events (a, b)
    are stored as (a, b, a); three as (a, b, c). ``counts`` tells the loss
    how many of the tracks are distinct.
    """

    vectors: np.ndarray  # (T, 3, 3, K)
    counts: np.ndarray  # (T, K) int

    @property
    def n_frames(self):
        return self.vectors.shape[0]


@dataclass
class FeatureClip:
    features: np.ndarray  # (7, T, 64)
    frame_hop_s: float = DEFAULT.frame_hop_s
    target: MultiAccdoaTarget = None
    events: List[Event] = field(default_factory=list)
    name: str = ""


# ---------------------------------------------------------------- audio io
def read_wav(path, config=DEFAULT):
    rate, data = wavfile.read(path)
    if data.ndim != 2 or data.shape[1] != 4:
        raise ShapeError(f"{path}: expected 4-channel WAV, got shape {data.shape}")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    x = x.T
    if rate != config.sample_rate:
        g = math.gcd(int(rate), config.sample_rate)
        x = resample_poly(x, config.sample_rate // g, int(rate) // g, axis=1)
    return FoaClip(x, config.sample_rate)


def write_wav(path, clip):
    wavfile.write(path, clip.sample_rate, np.ascontiguousarray(clip.samples.T.astype(np.float32)))


def read_events_csv(path):
    """DCASE-style rows: frame_idx,class_idx,track_idx,azimuth_deg,elevation_deg."""
    events = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            if not row[0].strip().lstrip("-").isdigit():
                continue  # header line
            events.append(
                Event(int(row[0]), int(row[1]), int(row[2]), float(row[3]), float(row[4]))
            )
    return events


def _wrap_az(az):
    az = int(round(az))
    return (az + 180) % 360 - 180


def write_events_csv(path, events):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for e in sorted(events):
            w.writerow([e.frame, e.cls, e.track, _wrap_az(e.azimuth), int(round(e.elevation))])


# ---------------------------------------------------------------- spectra
def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames_for(n_samples, config=DEFAULT):
    return -(-n_samples // config.hop)


def stft(clip, config=DEFAULT):
    """Complex spectrogram (4, T, n_fft//2+1), frames centred on multiples of the hop."""
    x = np.asarray(clip.samples, dtype=np.float64)
    N = x.shape[1]
    if N < config.win:
        raise TooShortError(f"clip has {N} samples, shorter than one {config.win}-sample window")
    half = config.win // 2
    xp = np.pad(x, ((0, 0), (half, half)), mode="reflect")
    T = n_frames_for(N, config)
    frames = np.lib.stride_tricks.sliding_window_view(xp, config.win, axis=1)[:, ::config.hop][:, :T]
    return np.fft.rfft(frames * hann(config.win), n=config.n_fft, axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config=DEFAULT):
    """Triangular mel filters (n_mels, n_fft//2+1); each row sums to one over FFT bins."""
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    return fb / fb.sum(axis=1, keepdims=True)


def logmel(spec, config=DEFAULT, fb=None):
    fb = mel_filterbank(config) if fb is None else fb
    power = spec.real ** 2 + spec.imag ** 2
    return np.log(power @ fb.T + config.log_floor)


def intensity_vectors(spec, config=DEFAULT, fb=None):
    """Energy-normalized active intensity (I_x, I_y, I_z) aggregated to mel bands."""
    fb = mel_filterbank(config) if fb is None else fb
    w, y, z, x = spec[0], spec[1], spec[2], spec[3]
    energy = sum(c.real ** 2 + c.imag ** 2 for c in (w, y, z, x)) + config.iv_eps
    wc = np.conj(w)
    iv = np.stack([(wc * x).real, (wc * y).real, (wc * z).real]) / energy
    return iv @ fb.T


def extract_features(clip, config=DEFAULT):
    """(7, T, n_mels) float32 feature tensor for one clip."""
    fb = mel_filterbank(config)
    spec = stft(clip, config)
    feats = np.concatenate([logmel(spec, config, fb), intensity_vectors(spec, config, fb)])
    return feats.astype(np.float32)


# ----------------------------------------------------------------- labels
def doa_to_vector(azimuth_deg, elevation_deg):
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def vector_to_doa(v):
    v = np.asarray(v, dtype=np.float64)
    az = math.degrees(math.atan2(v[1], v[0]))
    el = math.degrees(math.atan2(v[2], math.hypot(v[0], v[1])))
    return az, el


def label_frames_for(duration_s):
    return int(math.ceil(round(duration_s / LABEL_HOP_S, 6)))


def encode_target(events, n_frames, n_classes=N_CLASSES):
    vectors = np.zeros((n_frames, N_TRACKS, 3, n_classes))
    counts = np.zeros((n_frames, n_classes), dtype=np.int64)
    groups = {}
    seen = set()
    for e in events:
        if not 0 <= e.frame < n_frames:
            raise ShapeError(f"event frame {e.frame} outside target range [0, {n_frames})")
        if not 0 <= e.cls < n_classes:
            raise ShapeError(f"event class {e.cls} outside [0, {n_classes})")
        key = (e.frame, e.cls, e.track)
        if key in seen:
            raise ValueError(f"duplicate event for (frame, class, track) = {key}")
        seen.add(key)
        groups.setdefault((e.frame, e.cls), []).append(e)
    for (t, k), evs in groups.items():
        if len(evs) > N_TRACKS:
            raise CapacityError(
                f"{len(evs)} simultaneous events of class {k} at frame {t}; at most {N_TRACKS}"
            )
        evs.sort(key=lambda e: e.track)
        vecs = [doa_to_vector(e.azimuth, e.elevation) for e in evs]
        layout = {1: (0, 0, 0), 2: (0, 1, 0), 3: (0, 1, 2)}[len(vecs)]
        for track, src in enumerate(layout):
            vectors[t, track, :, k] = vecs[src]
        counts[t, k] = len(vecs)
    return MultiAccdoaTarget(vectors, counts)


# --------------------------------------------------------------- segments
@dataclass
class Segment:
    features: np.ndarray  # (7, seg_frames, F)
    target: MultiAccdoaTarget  # (seg_labels, ...)
    clip: str = ""
    index: int = 0


def segment(features, target, seg_frames=250, frames_per_label=5, name=""):
    """Split into non-overlapping fixed-length segments; the last one is zero-padded."""
    if seg_frames % frames_per_label:
        raise ShapeError("segment length must be a whole number of label frames")
    seg_labels = seg_frames // frames_per_label
    M, T, F = features.shape
    n_seg = max(1, -(-T // seg_frames))
    feats = np.zeros((M, n_seg * seg_frames, F), dtype=features.dtype)
    feats[:, :T] = features
    K = target.vectors.shape[-1]
    L = min(target.n_frames, n_seg * seg_labels)
    vec = np.zeros((n_seg * seg_labels, N_TRACKS, 3, K), dtype=target.vectors.dtype)
    cnt = np.zeros((n_seg * seg_labels, K), dtype=np.int64)
    vec[:L] = target.vectors[:L]
    cnt[:L] = target.counts[:L]
    out = []
    for i in range(n_seg):
        fs = slice(i * seg_frames, (i + 1) * seg_frames)
        ls = slice(i * seg_labels, (i + 1) * seg_labels)
        out.append(Segment(feats[:, fs].copy(), MultiAccdoaTarget(vec[ls].copy(), cnt[ls].copy()), name, i))
    return out


# ------------------------------------------------------------ clip bundle
def build_clip(clip, events, name="", n_classes=N_CLASSES, config=DEFAULT):
    feats = extract_features(clip, config)
    n_labels = max(label_frames_for(clip.duration_s), max((e.frame + 1 for e in events), default=0))
    target = encode_target(events, n_labels, n_classes)
    return FeatureClip(feats, config.frame_hop_s, target, list(events), name)


def load_clip(wav_path, csv_path=None, n_classes=N_CLASSES, config=DEFAULT):
    wav_path = Path(wav_path)
    csv_path = Path(csv_path) if csv_path else wav_path.with_suffix(".csv")
    events = read_events_csv(csv_path) if csv_path.exists() else []
    return build_clip(read_wav(wav_path, config), events, wav_path.stem, n_classes, config)


def save_feature_clip(path, fc):
    ev = np.array([list(e) for e in fc.events], dtype=np.float64).reshape(-1, 5)
    archive.save(
        path,
        {
            "features": fc.features,
            "target.vectors": fc.target.vectors,
            "target.counts": fc.target.counts,
            "events": ev,
        },
        {"kind": "feature_clip", "name": fc.name, "frame_hop_s": fc.frame_hop_s},
    )


def load_feature_clip(path):
    arrays, meta = archive.load(path)
    if meta.get("kind") != "feature_clip":
        raise ValueError(f"{path} is not a feature cache file")
    events = [
        Event(int(r[0]), int(r[1]), int(r[2]), float(r[3]), float(r[4])) for r in arrays["events"]
    ]
    target = MultiAccdoaTarget(arrays["target.vectors"], arrays["target.counts"])
    return FeatureClip(arrays["features"], meta["frame_hop_s"], target, events, meta["name"])


def load_dataset(directory, n_classes=N_CLASSES, config=DEFAULT):
    """All clips in ``directory``: cached ``*.cst`` features, else ``*.wav`` + ``*.csv`` pairs."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"data directory {directory} does not exist")
    cached = sorted(directory.glob("*.cst"))
    if cached:
        return [load_feature_clip(p) for p in cached]
    return [load_clip(p, None, n_classes, config) for p in sorted(directory.glob("*.wav"))]
