"""Command-line entry point: ``spkid <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/training error.
Progress goes to stderr; results go to files (``predict`` prints JSON lines).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from spkid.errors import DataError, MissingClass, SpkidError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("spkid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _ratios(text):
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three ratios")
    return parts


def _override(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spkid", description="Speaker identification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic multi-speaker corpus")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--duration", type=float, required=True, help="seconds per clip")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("split", help="re-split a manifest per class (in place)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=int, default=0)

    def training(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", help="checkpoint directory (overrides checkpoint_dir)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--set", type=_override, action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    training(p)
    p.add_argument("--objective", choices=("w2v", "hubert"), required=True)
    p.add_argument("--init", help="checkpoint whose encoder tensors seed the model")

    p = sub.add_parser("finetune", help="supervised speaker classification training")
    training(p)
    p.add_argument("--init", help="pretrained checkpoint whose encoder tensors seed the model")

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="classify WAV files (JSON line per file)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav", required=True, nargs="+")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=None)
    return parser


def _train_config(args, objective):
    from spkid.trainer import load_config, parse_config

    overrides = dict(args.set)
    overrides["objective"] = objective
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["checkpoint_dir"] = args.out
    if args.config:
        config = load_config(args.config, overrides)
    else:
        config = parse_config("", overrides)
    if not config.checkpoint_dir:
        raise UsageError("a checkpoint directory is required (--out or checkpoint_dir)")
    return config


def _progress(step, tl, parts):
    if "VL" in parts:
        extras = " ".join(f"{k}={v:.4f}" for k, v in parts.items())
        print(f"step {step} TL={tl:.4f} {extras}", file=sys.stderr, flush=True)


def cmd_synth(args):
    from spkid.synthgen import MANIFEST_NAME, synth_corpus

    manifest = synth_corpus(args.speakers, args.clips, args.duration, args.out, args.seed)
    print(f"wrote {len(manifest)} clips and {os.path.join(args.out, MANIFEST_NAME)}",
          file=sys.stderr)


def cmd_split(args):
    from spkid.audio_io import load_manifest, save_manifest, stratified_split

    manifest = stratified_split(load_manifest(args.manifest), args.ratios, args.seed)
    save_manifest(manifest, args.manifest)
    sizes = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"split {args.manifest}: {sizes}", file=sys.stderr)


def _checkpoint_init(path):
    from spkid.trainer import load_checkpoint

    return load_checkpoint(path) if path else None


def cmd_pretrain(args):
    from spkid.audio_io import load_manifest
    from spkid.trainer import format_config, pretrain

    config = _train_config(args, args.objective)
    manifest = load_manifest(args.manifest)
    os.makedirs(config.checkpoint_dir, exist_ok=True)
    with open(os.path.join(config.checkpoint_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(format_config(config))
    ckpt, trainlog = pretrain(config, manifest, init=_checkpoint_init(args.init),
                              progress=_progress)
    print(f"best VL {ckpt.meta['best_vl']:.6f} at step {ckpt.meta['best_step']}; "
          f"checkpoint {ckpt.path}", file=sys.stderr)


def cmd_finetune(args):
    from spkid.audio_io import load_manifest
    from spkid.trainer import finetune, format_config

    config = _train_config(args, "finetune")
    manifest = load_manifest(args.manifest)
    os.makedirs(config.checkpoint_dir, exist_ok=True)
    with open(os.path.join(config.checkpoint_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(format_config(config))
    ckpt, trainlog = finetune(config, manifest, init=_checkpoint_init(args.init),
                              progress=_progress)
    print(f"best VL {ckpt.meta['best_vl']:.6f} at step {ckpt.meta['best_step']}; "
          f"checkpoint {ckpt.path}", file=sys.stderr)


def cmd_evaluate(args):
    from spkid.audio_io import load_manifest
    from spkid.metrics import write_report
    from spkid.trainer import TrainLog, evaluate, load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    manifest = load_manifest(args.manifest)
    if manifest.labels != model.labels:
        raise MissingClass("manifest speakers differ from the checkpoint's label set")
    report = evaluate(model, manifest, args.split)
    trainlog_path = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "trainlog.csv")
    trainlog = TrainLog.read_csv(trainlog_path) if os.path.exists(trainlog_path) else TrainLog()
    write_report(report, report.confusion, trainlog, args.out)
    print(f"{args.split}: macro_f1={report.macro_f1:.4f} accuracy={report.accuracy:.4f} "
          f"-> {args.out}", file=sys.stderr)


def cmd_predict(args):
    from spkid.audio_io import read_wav
    from spkid.classify import predict
    from spkid.trainer import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    for path in args.wav:
        label, probs = predict(read_wav(path), model)
        print(json.dumps({"path": path, "label": label,
                          "probs": [round(float(p), 6) for p in probs]}))


def cmd_gradcheck(args):
    from spkid.gradsuite import TOLERANCE, run_suite

    tol = TOLERANCE if args.tol is None else args.tol
    failed = []

    def report(name, err):
        ok = err < tol
        if not ok:
            failed.append(name)
        print(f"{'PASS' if ok else 'FAIL'} {name:24s} max rel err {err:.3e}", file=sys.stderr)

    run_suite(range(args.seeds), report=report)
    if failed:
        raise GradientFailure(f"{len(failed)} case(s) above {tol:g}: {', '.join(failed)}")


class GradientFailure(SpkidError):
    pass


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if args.command is None:
            raise UsageError(parser.format_usage() + "spkid: error: a subcommand is required")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"spkid {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"spkid {args.command}: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SpkidError as exc:
        print(f"spkid {args.command}: runtime error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"spkid {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # argument values outside an operation's domain (durations, ratios, ...)
        print(f"spkid {args.command}: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
