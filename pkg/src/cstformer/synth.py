"""Free-field synthetic FoA scenes with exact labels."""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import CapacityError, ConfigError
from .features import (
    LABEL_HOP_S, N_CLASSES, N_TRACKS, SAMPLE_RATE, Event, FoaClip, write_events_csv, write_wav,
)

KINDS = ("tone", "chirp", "noise-burst")
OVERLAP_PROFILES = {"mono": 1, "ov2": 2, "ov3": 3}
FADE_S = 0.005


@dataclass
class SourceEvent:
    class_idx: int
    onset_s: float
    offset_s: float
    azimuth_deg: float
    elevation_deg: float
    kind: str = "tone"
    amplitude: float = 0.5


@dataclass
class SceneSpec:
    duration_s: float
    events: List[SourceEvent] = field(default_factory=list)
    noise_snr_db: Optional[float] = None
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["events"] = [SourceEvent(**e) for e in d.get("events", [])]
        return cls(**d)

    def validate(self):
        for e in self.events:
            if not 0 <= e.onset_s < e.offset_s <= self.duration_s + 1e-9:
                raise ConfigError(
                    f"event times must satisfy 0 <= onset < offset <= duration, got "
                    f"{e.onset_s}..{e.offset_s} in a {self.duration_s}s scene"
                )
            if e.kind not in KINDS:
                raise ConfigError(f"unknown source kind {e.kind!r}")
        # Same-class polyphony is checked at every onset, where it peaks.
        for e in self.events:
            active = [
                o for o in self.events
                if o.class_idx == e.class_idx and o.onset_s <= e.onset_s < o.offset_s
            ]
            if len(active) > N_TRACKS:
                raise CapacityError(
                    f"{len(active)} overlapping events of class {e.class_idx} at "
                    f"{e.onset_s}s; at most {N_TRACKS}"
                )


def class_frequency(class_idx):
    """Characteristic frequency of a class: 250 Hz spaced by 0.4 octave."""
    return 250.0 * 2.0 ** (0.4 * class_idx)


def source_signal(kind, class_idx, n, rng, sample_rate=SAMPLE_RATE):
    t = np.arange(n) / sample_rate
    f0 = class_frequency(class_idx)
    if kind == "tone":
        s = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    elif kind == "chirp":
        dur = max(n / sample_rate, 1e-3)
        f1 = f0 * 1.3
        s = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t * t))
    elif kind == "noise-burst":
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec[(freqs < f0 / 1.15) | (freqs > f0 * 1.15)] = 0
        s = np.fft.irfft(spec, n)
        s /= max(np.sqrt(np.mean(s ** 2)) * np.sqrt(2), 1e-12)
    else:
        raise ConfigError(f"unknown source kind {kind!r}")
    nf = min(int(FADE_S * sample_rate), n // 2)
    if nf:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(nf) / nf)
        s[:nf] *= ramp
        s[n - nf:] *= ramp[::-1]
    return s


def foa_encode(signal, azimuth_deg, elevation_deg):
    """SN3D first-order encoding, rows in W, Y, Z, X order."""
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    gains = np.array([1.0, np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return gains[:, None] * signal[None, :]


def active_frames(onset_s, offset_s):
    """Label frames whose centre lies in [onset, offset)."""
    first = int(np.ceil(round(onset_s / LABEL_HOP_S - 0.5, 9)))
    last = int(np.ceil(round(offset_s / LABEL_HOP_S - 0.5, 9))) - 1
    return range(max(first, 0), last + 1)


def assign_tracks(events):
    """Lowest free per-class slot for each event, in onset order."""
    order = sorted(range(len(events)), key=lambda i: (events[i].onset_s, i))
    tracks = [0] * len(events)
    for i in order:
        e = events[i]
        busy = {
            tracks[j] for j in order[:order.index(i)]
            if events[j].class_idx == e.class_idx and events[j].offset_s > e.onset_s
        }
        slot = 0
        while slot in busy:
            slot += 1
        tracks[i] = slot
    return tracks


def scene_events(spec):
    n_labels = int(np.ceil(round(spec.duration_s / LABEL_HOP_S, 6)))
    out = []
    for e, tr in zip(spec.events, assign_tracks(spec.events)):
        for f in active_frames(e.onset_s, e.offset_s):
            if f < n_labels:
                out.append(Event(f, e.class_idx, tr, float(e.azimuth_deg), float(e.elevation_deg)))
    return sorted(out)


def render(spec, sample_rate=SAMPLE_RATE):
    """Render a scene to (FoaClip, EventList)."""
    spec.validate()
    n = int(round(spec.duration_s * sample_rate))
    out = np.zeros((4, n))
    for i, e in enumerate(spec.events):
        rng = np.random.default_rng([spec.seed, i])
        a = int(round(e.onset_s * sample_rate))
        b = min(int(round(e.offset_s * sample_rate)), n)
        s = e.amplitude * source_signal(e.kind, e.class_idx, b - a, rng, sample_rate)
        out[:, a:b] += foa_encode(s, e.azimuth_deg, e.elevation_deg)
    if spec.noise_snr_db is not None:
        rng = np.random.default_rng([spec.seed, 1 << 20])
        p_sig = max(np.mean(out[0] ** 2), 1e-12)
        std = np.sqrt(p_sig / 10 ** (spec.noise_snr_db / 10))
        out += std * rng.standard_normal(out.shape)
    return FoaClip(out, sample_rate), scene_events(spec)


def sample_scene(rng, duration_s=5.0, class_count=N_CLASSES, overlap_profile="ov2",
                 noise_snr_db=None, seed=0):
    """Draw a random scene; events sit on the 100 ms label grid."""
    if overlap_profile not in OVERLAP_PROFILES:
        raise ConfigError(f"overlap profile must be one of {sorted(OVERLAP_PROFILES)}")
    if not 1 <= class_count <= N_CLASSES:
        raise ConfigError(f"class_count must be in [1, {N_CLASSES}]")
    lanes = OVERLAP_PROFILES[overlap_profile]
    total = int(round(duration_s / LABEL_HOP_S))
    events = []
    for _ in range(lanes):
        t = int(rng.integers(0, 6))
        while True:
            length = int(rng.integers(5, 21))
            if t + length > total:
                break
            events.append(
                SourceEvent(
                    class_idx=int(rng.integers(0, class_count)),
                    onset_s=round(t * LABEL_HOP_S, 3),
                    offset_s=round((t + length) * LABEL_HOP_S, 3),
                    azimuth_deg=float(rng.integers(-180, 180)),
                    elevation_deg=float(rng.integers(-60, 61)),
                    kind=KINDS[int(rng.integers(0, len(KINDS)))],
                    amplitude=round(float(rng.uniform(0.3, 0.7)), 4),
                )
            )
            t += length + int(rng.integers(2, 11))
    events.sort(key=lambda e: (e.onset_s, e.class_idx))
    return SceneSpec(duration_s, events, noise_snr_db, seed)


def make_dataset(out_dir, n_clips, class_count=N_CLASSES, overlap_profile="ov2", seed=0,
                 duration_s=5.0, noise_snr_db=None):
    """Write ``clip_XXXX.wav`` / ``.csv`` pairs plus ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_clips)
    manifest = {"seed": seed, "class_count": class_count, "overlap_profile": overlap_profile,
                "duration_s": duration_s, "clips": []}
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        clip_seed = int(ss.generate_state(1)[0])
        spec = sample_scene(rng, duration_s, class_count, overlap_profile, noise_snr_db, clip_seed)
        clip, events = render(spec)
        stem = f"clip_{i:04d}"
        write_wav(out / f"{stem}.wav", clip)
        write_events_csv(out / f"{stem}.csv", events)
        manifest["clips"].append({"wav": f"{stem}.wav", "csv": f"{stem}.csv", "scene": asdict(spec)})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
