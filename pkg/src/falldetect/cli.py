"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

Options can also come from a flat JSON file (``--config``) whose keys are the
long flag names with underscores (``batch_size``, ``aux_weight``, ...).
Explicit flags override the file, the file overrides built-in defaults. Every
command that writes an output directory drops a ``config.json`` snapshot of
the resolved options there.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import weights
from .data import DataError, ingest, preprocess, stack, synth_dataset, write_dataset
from .evaluation import confusion, fit_model, loso_run, metrics, report_table
from .gradcheck import run_suite
from .models import TABLE_ORDER, ModelKind, predict_from_probs
from .optim import TrainConfig

log = logging.getLogger("falldetect")

KIND_NAMES = [k.value for k in ModelKind]

DEFAULTS = {
    "model": ModelKind.ENSEMBLE_CFG.value,
    "seed": 0,
    "epochs": 40,
    "batch_size": 32,
    "lr": 0.01,
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "aux_weight": 1.0,
    "standardize": False,
    "temporal_flatten": "sequence",
    "rate": 238.0,
    "jobs": 1,
}
TRAIN_KEYS = ("epochs", "batch_size", "lr", "beta1", "beta2", "eps", "aux_weight")


class UsageError(Exception):
    pass


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def kind_name(text: str) -> str:
    try:
        return ModelKind.parse(text).value
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid model {text!r} (choose from {', '.join(KIND_NAMES)})") from None


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with default values for these flags")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--epochs", type=positive_int, help="default 40")
    p.add_argument("--batch-size", type=positive_int, help="default 32")
    p.add_argument("--lr", type=float, help="Adam learning rate (default 0.01)")
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--eps", type=float, help="Adam epsilon (default 1e-8)")
    p.add_argument("--aux-weight", type=float, help="weight of the branch losses (default 1.0)")
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=None,
                   help="z-score channels with training statistics (default off)")
    p.add_argument("--temporal-flatten", choices=["sequence", "last"],
                   help="flatten the whole recurrent sequence or keep the last step")
    p.add_argument("--rate", type=float, help="sample rate of the instance files in Hz (default 238)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="falldetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a deterministic synthetic dataset")
    p.add_argument("--subjects", type=positive_int, required=True)
    p.add_argument("--adl", type=positive_int, required=True, help="ADL instances per subject")
    p.add_argument("--falls", type=positive_int, required=True, help="fall instances per subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("convert", help="convert FallAllD waist accelerometer files (best effort)")
    p.add_argument("--src", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--device", type=int, default=3)

    p = sub.add_parser("train", help="train one model on a whole dataset")
    p.add_argument("--model", type=kind_name, help=f"one of {', '.join(KIND_NAMES)}")
    p.add_argument("--data", type=Path, help="manifest CSV")
    p.add_argument("--out", type=Path)
    _add_training_flags(p)

    p = sub.add_parser("loso", help="leave-one-subject-out evaluation")
    p.add_argument("--model", help=f"'all' or one of {', '.join(KIND_NAMES)}")
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--jobs", type=positive_int, help="folds trained in parallel (default 1)")
    p.add_argument("--save-weights", action="store_true", help="also write each fold's weights")
    _add_training_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seeds", type=positive_int, default=100)
    p.add_argument("--ensemble-coords", type=int, default=8,
                   help="coordinates sampled per tensor of the tiny ensemble; 0 checks all")
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("eval", help="evaluate saved weights on a dataset")
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=kind_name, help="expected model kind; checked against the weights")
    p.add_argument("--rate", type=float, default=238.0)
    return parser


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge built-in defaults, the optional JSON config and explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        known = set(DEFAULTS) | {"data", "out"}
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise UsageError(f"unknown config keys {unknown}; valid keys: {sorted(known)}")
        opts.update(loaded)
    for key, value in vars(args).items():
        if key in ("config", "command", "verbose") or value is None:
            continue
        opts[key] = str(value) if isinstance(value, Path) else value
    for key in ("data", "out"):
        if not opts.get(key):
            raise UsageError(f"--{key} is required (flag or config key)")
    return opts


def train_config(opts: dict) -> TrainConfig:
    return TrainConfig(**{k: opts[k] for k in TRAIN_KEYS})


def _write_snapshot(out: Path, opts: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(opts, indent=2, sort_keys=True) + "\n")


def write_history(path: Path, history: list[float]) -> None:
    lines = ["epoch,mean_loss"] + [f"{i},{v!r}" for i, v in enumerate(history, start=1)]
    path.write_text("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    instances = synth_dataset(args.subjects, args.adl, args.falls, args.seed)
    manifest = write_dataset(instances, args.out)
    print(f"wrote {len(instances)} instances and {manifest}")
    return 0


def cmd_convert(args) -> int:
    from .fallalld import convert

    manifest = convert(args.src, args.out, device=args.device)
    print(f"wrote {manifest}")
    return 0


def cmd_train(args, opts) -> int:
    out = Path(opts["out"])
    kind = ModelKind.parse(opts["model"])
    segments = preprocess(ingest(opts["data"], opts["rate"]))
    if not segments:
        raise DataError(f"{opts['data']}: no usable segments")
    _write_snapshot(out, opts)
    model, history, scaler = fit_model(
        kind, segments, train_config(opts), opts["seed"], opts["standardize"],
        temporal_flatten=opts["temporal_flatten"],
    )
    weights.save(out / "weights.fdw", model, scaler)
    write_history(out / "history.csv", history)
    x, y = stack(segments)
    if scaler is not None:
        x = scaler(x)
    report = metrics(confusion(predict_from_probs(model.predict_proba(x)), y))
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_loso(args, opts) -> int:
    out = Path(opts["out"])
    if str(opts["model"]).lower() == "all":
        kinds = list(TABLE_ORDER)
    else:
        try:
            kinds = [ModelKind.parse(opts["model"])]
        except ValueError as e:
            raise UsageError(str(e)) from None
    instances = ingest(opts["data"], opts["rate"])
    _write_snapshot(out, opts)
    cfg = train_config(opts)
    reports = {}
    failed = False
    for kind in kinds:
        kdir = out / kind.value
        kdir.mkdir(parents=True, exist_ok=True)

        def on_fold(subject, model, history, scaler, kdir=kdir):
            write_history(kdir / f"history_fold{subject}.csv", history)
            if args.save_weights:
                weights.save(kdir / f"weights_fold{subject}.fdw", model, scaler)

        rep = loso_run(kind, instances, cfg, opts["seed"], opts["standardize"], opts["jobs"], on_fold,
                       temporal_flatten=opts["temporal_flatten"])
        (kdir / "report.json").write_text(rep.to_json())
        reports[kind] = rep
        if rep.failures:
            failed = True
            for s, msg in rep.failures.items():
                print(f"error: {kind.value} fold {s} failed: {msg}", file=sys.stderr)
    done = {k: r for k, r in reports.items() if r.pooled is not None}
    if done:
        text, csv_text = report_table(done)
        _, macro_csv = report_table(done, view="macro")
        (out / "table.txt").write_text(text)
        (out / "table.csv").write_text(csv_text)
        (out / "table_macro.csv").write_text(macro_csv)
        print(text, end="")
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    coords = args.ensemble_coords if args.ensemble_coords > 0 else None
    worst = run_suite(args.seeds, args.eps, ensemble_coords=coords)
    ok = True
    print(f"{'layer':<16}{'max rel. error':>16}  (eps={args.eps:g}, seeds={args.seeds})")
    for name, err in worst.items():
        flag = "ok" if err < args.tolerance else "FAIL"
        ok &= err < args.tolerance
        print(f"{name:<16}{err:>16.3e}  {flag}")
    return 0 if ok else 1


def cmd_eval(args) -> int:
    model, scaler, header = weights.load(args.weights)
    if args.model is not None and args.model != header["kind"]:
        raise weights.WeightsError(f"weights hold a {header['kind']} model but --model is {args.model}")
    segments = preprocess(ingest(args.data, args.rate))
    if not segments:
        raise DataError(f"{args.data}: no usable segments")
    x, y = stack(segments)
    if scaler is not None:
        x = scaler(x)
    report = metrics(confusion(predict_from_probs(model.predict_proba(x)), y))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with np.errstate(over="raise", invalid="raise"):
        return _dispatch(parser, args)


def _dispatch(parser, args) -> int:
    try:
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "convert":
            return cmd_convert(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "eval":
            return cmd_eval(args)
        opts = resolve(args, parser)
        if args.command == "train":
            return cmd_train(args, opts)
        return cmd_loso(args, opts)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except (DataError, weights.WeightsError, ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
