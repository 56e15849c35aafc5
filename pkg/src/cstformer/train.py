"""Training loop: Adam, tri-stage learning rate, ADPIT loss, periodic SELD evaluation."""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .errors import ConfigError
from .features import segment
from .loss import adpit_loss
from .metrics import SELDEvaluator, decode_events
from .model import CSTFormer, ModelConfig, build_model

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss or gradient is detected."""


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    lr_peak: float = 1e-3
    ramp_frac: float = 0.05
    hold_frac: float = 0.45
    decay_frac: float = 0.5
    final_lr_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    seed: int = 0
    eval_every: int = 10
    val_fraction: float = 0.2
    threshold: float = 0.5
    precision: str = "float32"
    checkpoint_dir: str = "checkpoints"

    def validate(self):
        if abs(self.ramp_frac + self.hold_frac + self.decay_frac - 1.0) > 1e-9:
            raise ConfigError("ramp_frac + hold_frac + decay_frac must equal 1")
        if min(self.ramp_frac, self.hold_frac, self.decay_frac) < 0:
            raise ConfigError("scheduler fractions must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        return self

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at(step, total_steps, cfg):
    """Tri-stage schedule on [0, total_steps]: linear ramp, hold, cosine decay to peak*ratio."""
    peak = cfg.lr_peak
    floor = peak * cfg.final_lr_ratio
    ramp = cfg.ramp_frac * total_steps
    hold_end = ramp + cfg.hold_frac * total_steps
    if step < ramp:
        return peak * step / ramp
    if step <= hold_end:
        return peak
    span = total_steps - hold_end
    prog = min((step - hold_end) / span, 1.0) if span > 0 else 1.0
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * prog))


# ---------------------------------------------------------------------- adam
@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update applied in place to ``params`` (name -> array)."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, lr):
        data = {n: p.data for n, p in self.params.items()}
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(data, grads, self.state, lr, self.betas, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                         for p in params if p.grad is not None))


# --------------------------------------------------------------- checkpoints
def save_checkpoint(path, model, epoch=0, history=None, extra=None):
    meta = {"kind": CHECKPOINT_KIND, "model_config": model.cfg.to_dict(), "epoch": epoch,
            "history": history or []}
    meta.update(extra or {})
    archive.save(path, model.state_dict(), meta)


def load_checkpoint(path):
    arrays, meta = archive.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a model checkpoint")
    model = CSTFormer(ModelConfig.from_dict(meta["model_config"]))
    dtype = next(a.dtype for n, a in arrays.items() if not n.startswith("buffer:"))
    if dtype != np.float32:
        model.astype(dtype)
    model.load_state_dict(arrays)
    model.set_rng(np.random.Generator(np.random.Philox(key=int(meta.get("seed", 0)))))
    return model, meta


# ---------------------------------------------------------------- inference
def predict_clip(model, features, batch_size=32):
    """(7, T, F) clip features -> (ceil(T/5), 3, 3, K) multi-ACCDOA output."""
    cfg = model.cfg
    seg_frames = cfg.n_frames
    per_label = cfg.time_pool
    T = features.shape[1]
    n_seg = max(1, -(-T // seg_frames))
    padded = np.zeros((features.shape[0], n_seg * seg_frames, features.shape[2]), dtype=np.float32)
    padded[:, :T] = features
    segs = padded.reshape(features.shape[0], n_seg, seg_frames, -1).transpose(1, 0, 2, 3)
    outs = [model.predict(segs[i:i + batch_size]) for i in range(0, n_seg, batch_size)]
    out = np.concatenate(outs).reshape(-1, cfg.n_tracks, 3, cfg.n_classes)
    return out[: -(-T // per_label)]


def evaluate_clips(model, clips, threshold=0.5, batch_size=32):
    ev = SELDEvaluator(model.cfg.n_classes)
    for c in clips:
        pred = predict_clip(model, c.features, batch_size)
        ev.update(decode_events(pred, threshold), c.events)
    return ev.report()


# -------------------------------------------------------------------- train
@dataclass
class RunRecord:
    epoch_loss: list = field(default_factory=list)
    step_lr: list = field(default_factory=list)
    evals: dict = field(default_factory=dict)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = math.inf
    n_parameters: int = 0


def _fmt(x):
    return "" if x is None else format(float(x), ".8g")


def split_clips(clips, cfg):
    if cfg.val_fraction <= 0 or len(clips) < 2:
        return list(clips), list(clips)
    order = np.random.default_rng([cfg.seed, 7]).permutation(len(clips))
    n_val = min(len(clips) - 1, max(1, int(round(len(clips) * cfg.val_fraction))))
    val = [clips[i] for i in sorted(order[:n_val])]
    tr = [clips[i] for i in sorted(order[n_val:])]
    return tr, val


def input_statistics(segments):
    feats = np.stack([s.features for s in segments]).astype(np.float64)  # (N, M, T, F)
    mu = feats.mean(axis=(0, 2))
    sd = feats.std(axis=(0, 2))
    return mu, np.maximum(sd, 1e-3)


def train(model_cfg, train_cfg, clips, out_dir=None, on_epoch=None):
    """Train a model on ``clips`` (list of FeatureClip). Returns (model, RunRecord)."""
    train_cfg.validate()
    model_cfg.validate()
    if not clips:
        raise ConfigError("dataset is empty")
    train_clips, val_clips = split_clips(clips, train_cfg)
    segs = [
        s for c in train_clips
        for s in segment(c.features, c.target, model_cfg.n_frames, model_cfg.time_pool, c.name)
    ]
    if not segs:
        raise ConfigError("dataset produced no training segments")
    dtype = np.dtype(train_cfg.precision)
    model = build_model(model_cfg, train_cfg.seed, dtype)
    model.set_input_normalization(*input_statistics(segs))
    opt = Adam(model.named_parameters(), (train_cfg.beta1, train_cfg.beta2), train_cfg.adam_eps)
    rng = np.random.default_rng([train_cfg.seed, 1])
    steps_per_epoch = -(-len(segs) // train_cfg.batch_size)
    total = train_cfg.epochs * steps_per_epoch
    record = RunRecord(n_parameters=model.num_parameters())

    out = Path(out_dir) if out_dir else None
    ckpt_dir = metrics_fh = log_fh = None
    if out:
        ckpt_dir = out / train_cfg.checkpoint_dir
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(
            {"model": model_cfg.to_dict(), "train": asdict(train_cfg)}, indent=2, sort_keys=True) + "\n")
        metrics_fh = open(out / "metrics.csv", "w", newline="")
        metrics_fh.write("epoch,loss,lr,ER,F,LE,LR,SELD\n")
        log_fh = open(out / "log.txt", "w")

    def emit(msg):
        log.info(msg)
        if log_fh:
            log_fh.write(msg + "\n")
            log_fh.flush()

    emit(f"seed: {train_cfg.seed}")
    emit(f"variant: {model_cfg.variant} cmt={model_cfg.use_cmt} pooling={model_cfg.pooling}")
    emit(f"parameters: {record.n_parameters}")
    emit(f"segments: {len(segs)} train clips: {len(train_clips)} eval clips: {len(val_clips)}")

    step = 0
    history = []
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = rng.permutation(len(segs))
            losses = []
            for bi in range(steps_per_epoch):
                idx = order[bi * train_cfg.batch_size:(bi + 1) * train_cfg.batch_size]
                x = np.stack([segs[i].features for i in idx])
                vec = np.stack([segs[i].target.vectors for i in idx]).astype(dtype)
                cnt = np.stack([segs[i].target.counts for i in idx])
                opt.zero_grad()
                loss = adpit_loss(model(x), vec, cnt)
                lv = float(loss.data)
                loss.backward()
                gn = grad_norm(opt.params.values())
                lr = lr_at(step + 1, total, train_cfg)
                if not (math.isfinite(lv) and math.isfinite(gn)):
                    diag = {"epoch": epoch, "batch_index": bi, "step": step, "lr": lr,
                            "loss": lv, "grad_norm": gn,
                            "param_grad_norms": {n: grad_norm([p]) for n, p in opt.params.items()
                                                 if p.grad is not None}}
                    if out:
                        (out / "diagnostic.json").write_text(json.dumps(diag, indent=2, default=str))
                    raise TrainingAborted(
                        f"non-finite loss/gradient at epoch {epoch}, batch {bi}: loss={lv} "
                        f"grad_norm={gn} lr={lr}"
                    )
                if train_cfg.grad_clip and gn > train_cfg.grad_clip:
                    scale = train_cfg.grad_clip / (gn + 1e-12)
                    for p in opt.params.values():
                        if p.grad is not None:
                            p.grad *= scale
                opt.step(lr)
                record.step_lr.append(lr)
                losses.append(lv)
                step += 1
            epoch_loss = float(np.mean(losses))
            record.epoch_loss.append(epoch_loss)
            report = None
            if epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs:
                report = evaluate_clips(model, val_clips, train_cfg.threshold, train_cfg.batch_size)
                record.evals[epoch] = report
            row = {"epoch": epoch, "loss": epoch_loss, "lr": record.step_lr[-1]}
            if report:
                row.update(ER=report.ER, F=report.F, LE=report.LE, LR=report.LR, SELD=report.SELD_score)
            history.append(row)
            if metrics_fh:
                metrics_fh.write(",".join(
                    [str(epoch)] + [_fmt(row.get(k)) for k in ("loss", "lr", "ER", "F", "LE", "LR", "SELD")]
                ) + "\n")
                metrics_fh.flush()
            dt = time.perf_counter() - t0
            record.wall_time.append(dt)
            msg = f"epoch {epoch} loss {epoch_loss:.6f} lr {row['lr']:.3e} time {dt:.2f}s"
            if report:
                msg += "  " + report.summary()
            emit(msg)
            if report and report.SELD_score < record.best_score:
                record.best_score = report.SELD_score
                record.best_epoch = epoch
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "best.ckpt", model, epoch, history,
                                    {"seed": train_cfg.seed, "train_config": asdict(train_cfg)})
            if on_epoch:
                on_epoch(epoch, row, model)
        if ckpt_dir:
            save_checkpoint(ckpt_dir / "last.ckpt", model, train_cfg.epochs, history,
                            {"seed": train_cfg.seed, "train_config": asdict(train_cfg)})
    finally:
        if metrics_fh:
            metrics_fh.close()
        if log_fh:
            log_fh.close()
    return model, record
