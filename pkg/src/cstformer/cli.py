"""Command-line entry point: synth, extract, train, evaluate, infer, selftest.

Exit codes: 0 success, 1 user error (bad flags, missing or corrupt files),
2 internal invariant violation (failed self-test, aborted training).
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CSTFormerError, ChecksumError, ConfigError, ShapeError, TooShortError

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("cstformer")


class InvariantViolation(RuntimeError):
    pass


def _load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    unknown = set(cfg) - {"model", "train"}
    if unknown:
        raise ConfigError(f"config file {p}: unknown top-level keys {sorted(unknown)}; use 'model' and 'train'")
    return cfg


# ---------------------------------------------------------------- commands
def cmd_synth(args):
    from .synth import make_dataset
    out = make_dataset(args.out, args.clips, args.classes, args.overlap, args.seed,
                       args.duration, args.snr)
    print(f"wrote {args.clips} clips to {out} (seed {args.seed})")


def cmd_extract(args):
    from .features import load_dataset, save_feature_clip
    src = Path(args.data)
    if not src.is_dir():
        raise FileNotFoundError(f"data directory {src} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clips = load_dataset(src)
    for c in clips:
        save_feature_clip(out / f"{c.name}.cst", c)
    print(f"extracted {len(clips)} clips to {out}")


def cmd_train(args):
    from .features import load_dataset
    from .model import ModelConfig
    from .train import TrainConfig, train

    cfg = _load_config(args.config)
    model_cfg = ModelConfig.from_dict(cfg.get("model", {}))
    train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    if args.variant:
        model_cfg.variant = args.variant.upper()
    if args.pooling:
        model_cfg.pooling = args.pooling
    if args.no_cmt:
        model_cfg.use_cmt = False
    for name in ("epochs", "seed", "batch_size", "eval_every"):
        val = getattr(args, name)
        if val is not None:
            setattr(train_cfg, name, val)
    data = Path(args.data)
    if not data.is_dir():
        raise FileNotFoundError(f"data directory {data} does not exist; run 'cstformer synth --out {data}' first")
    clips = load_dataset(data)
    if not clips:
        raise ConfigError(f"no *.wav or *.cst clips found in {data}")
    _, record = train(model_cfg, train_cfg, clips, args.out)
    print(f"done: {len(record.epoch_loss)} epochs, final loss {record.epoch_loss[-1]:.6f}, "
          f"best SELD {record.best_score:.4f} at epoch {record.best_epoch}")


def cmd_evaluate(args):
    from .features import read_events_csv
    from .metrics import evaluate
    for p in (args.pred, args.ref):
        if not Path(p).is_file():
            raise FileNotFoundError(f"{p} not found")
    report = evaluate(read_events_csv(args.pred), read_events_csv(args.ref), args.classes,
                      args.doa_threshold)
    print(report.summary())
    print(f"SELD_score {report.SELD_score}")
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")


def cmd_infer(args):
    from .features import extract_features, read_wav, write_events_csv
    from .metrics import decode_events
    from .train import load_checkpoint, predict_clip

    for p in (args.checkpoint, args.wav):
        if not Path(p).is_file():
            raise FileNotFoundError(f"{p} not found")
    model, meta = load_checkpoint(args.checkpoint)
    features = extract_features(read_wav(args.wav))
    events = decode_events(predict_clip(model, features), args.threshold)
    write_events_csv(args.out, events)
    print(f"wrote {len(events)} event rows to {args.out} (checkpoint epoch {meta.get('epoch')}, "
          f"seed {meta.get('seed')})")


def cmd_selftest(args):
    from .selftest import run_selftest
    results = run_selftest(args.seed, args.inject_fault)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise InvariantViolation(f"self-test failed: {', '.join(failed)}")


# ------------------------------------------------------------------ parser
def build_parser():
    p = argparse.ArgumentParser(prog="cstformer", description="CST-former SELD toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic FoA dataset (wav + csv pairs)")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--overlap", choices=["mono", "ov2", "ov3"], default="ov2")
    s.add_argument("--duration", type=float, default=5.0, help="clip length in seconds")
    s.add_argument("--classes", type=int, default=13)
    s.add_argument("--snr", type=float, default=None, help="diffuse noise SNR in dB (default: noiseless)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="cache 7x T x 64 features and targets per clip")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    s.add_argument("--config", default=None, help='JSON file with optional "model" and "train" sections')
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", type=str.upper, choices=["DST", "DCA", "ULE"], default=None)
    s.add_argument("--pooling", choices=["front", "middle"], default=None)
    s.add_argument("--no-cmt", action="store_true", help="drop the LPU and IRFFN sublayers")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--eval-every", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a prediction CSV against a reference CSV")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", default=None, help="write the full report as JSON")
    s.add_argument("--classes", type=int, default=13)
    s.add_argument("--doa-threshold", type=float, default=20.0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("infer", help="run a checkpoint on one FoA wav and write a DCASE csv")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("selftest", help="run the fast invariant checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject-fault", default=None, metavar="CHECK",
                   help="scale one gradient check's analytic gradient by 1.01 (negative control)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    from .train import TrainingAborted
    try:
        args.func(args)
    except (InvariantViolation, TrainingAborted) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except ChecksumError as e:
        print(f"error: checksum failure: {e}", file=sys.stderr)
        return EXIT_USER
    except (FileNotFoundError, ConfigError, ShapeError, TooShortError, CSTFormerError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception as e:  # anything else is a bug, not a usage problem
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
