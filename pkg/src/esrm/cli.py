"""Command line entry point: ``esrm {run,contaminate,plots,export-embeddings,make-toy}``.

Exit codes: 0 success, 1 configuration or input error, 2 a run failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .buffer import load_buffer
from .config import ConfigError, parse_config
from .data import (
    ContaminationSpec,
    DatasetFormatError,
    DatasetStructureError,
    Provenance,
    contaminate,
    load_dataset,
    save_dataset,
)
from .experiment import emit_plots, run_battery
from .metrics import export_embeddings
from .model import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2

log = logging.getLogger("esrm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for run failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _pairs(values: list[str] | None, flag: str) -> dict[str, str]:
    out = {}
    for item in values or []:
        tag, sep, rest = item.partition("=")
        if not sep or not tag or not rest:
            raise UsageError(f"{flag} expects TAG=VALUE, got {item!r}")
        out[tag] = rest
    return out


def _class_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    out: list[int] = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        try:
            out += list(range(int(lo), int(hi) + 1)) if sep else [int(lo)]
        except ValueError:
            raise UsageError(f"bad class list {text!r}") from None
    return out


def cmd_run(args) -> int:
    overrides = {}
    if args.ratio is not None:
        overrides["data.ratio"] = args.ratio
    if args.buffer_size is not None:
        overrides["train.buffer_capacity"] = args.buffer_size
    if args.method is not None:
        overrides["train.method"] = args.method
    if args.mem_strategy is not None:
        overrides["train.mem_strategy"] = args.mem_strategy
    if args.seed:
        overrides["seeds"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    cfg = parse_config(args.config, overrides)
    record = run_battery(cfg)
    for key, stats in record.summary().items():
        print(f"{key}: {stats['mean']:.4f} +/- {stats['std']:.4f} (n={stats['n']})")
    if record.failed:
        for r in record.failed:
            print(f"seed {r['seed']} failed: {r['error']}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def cmd_contaminate(args) -> int:
    twin_roots = _pairs(args.twin, "--twin")
    if not twin_roots:
        raise UsageError("at least one --twin TAG=DIR is required")
    shares = {k: float(v) for k, v in _pairs(args.share, "--share").items()} or {
        t: 1.0 / len(twin_roots) for t in twin_roots
    }
    real = load_dataset(args.real, args.classes)
    twins = {t: load_dataset(p, args.classes, provenance=Provenance.synthetic(t)) for t, p in twin_roots.items()}
    out = contaminate(real, twins, ContaminationSpec(args.ratio, shares, args.seed))
    save_dataset(out, args.out)
    n_syn = sum(out.synthetic_counts())
    print(f"wrote {len(out)} samples ({n_syn} synthetic) to {args.out}")
    return EXIT_OK


def cmd_plots(args) -> int:
    if not (Path(args.results) / "summary.json").exists():
        raise UsageError(f"{args.results} holds no battery results")
    for path in emit_plots(args.results, args.out):
        print(path)
    return EXIT_OK


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    for name in ("model.pt", "buffer.npz"):
        if not (run_dir / name).exists():
            raise UsageError(f"{run_dir / name} not found")
    model, _ = load_checkpoint(run_dir / "model.pt")
    buf = load_buffer(run_dir / "buffer.npz")
    n = export_embeddings(model, buf, args.out, class_filter=_class_list(args.classes))
    print(f"wrote {n} rows to {args.out}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .toy import ToySpec, make_benchmark

    spec = ToySpec(image_size=args.image_size, train_per_class=args.train_per_class, test_per_class=args.test_per_class)
    train, test, twin = make_benchmark(spec, args.seed)
    root = Path(args.out)
    for name, ds in (("real_train", train), ("real_test", test), ("twin", twin)):
        save_dataset(ds, root / name)
    cfg = {
        "data": {
            "real_root": str((root / "real_train").resolve()),
            "test_root": str((root / "real_test").resolve()),
            "twin_roots": {"twin": str((root / "twin").resolve())},
            "class_count": spec.n_classes,
            "ratio": 0.8,
        },
        "split": {"mode": "cil", "n_tasks": 5},
        "train": {
            "backbone": "reduced_cnn",
            "buffer_capacity": 500,
            "optimizer": "adamw",
            "lr": 0.001,
        },
        "seeds": [0, 1, 2],
        "out_dir": str((root / "results").resolve()),
    }
    (root / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))
    print(f"wrote toy benchmark and config.yaml to {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="esrm", description="Online continual learning under synthetic data contamination.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a seed battery from a YAML config")
    r.add_argument("config")
    r.add_argument("--ratio", type=float, help="contamination ratio P")
    r.add_argument("--buffer-size", type=int)
    r.add_argument("--method", choices=("esrm", "er"))
    r.add_argument("--mem-strategy", choices=("es", "reservoir", "real_only", "synthetic_only"))
    r.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    r.add_argument("--out", help="results directory")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("contaminate", help="write a contaminated copy of a real dataset")
    c.add_argument("--real", required=True)
    c.add_argument("--twin", action="append", metavar="TAG=DIR", required=True)
    c.add_argument("--share", action="append", metavar="TAG=FRACTION")
    c.add_argument("--classes", type=int, required=True)
    c.add_argument("--ratio", type=float, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_contaminate)

    pl = sub.add_parser("plots", help="tables and figures from battery results")
    pl.add_argument("results")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plots)

    e = sub.add_parser("export-embeddings", help="projection embeddings of a run's final buffer as CSV")
    e.add_argument("run_dir")
    e.add_argument("--classes", help="e.g. 0-9 or 1,3,5")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    t = sub.add_parser("make-toy", help="write the procedural toy benchmark and a starter config")
    t.add_argument("out")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--image-size", type=int, default=16)
    t.add_argument("--train-per-class", type=int, default=200)
    t.add_argument("--test-per-class", type=int, default=100)
    t.set_defaults(func=cmd_make_toy)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetStructureError, DatasetFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
