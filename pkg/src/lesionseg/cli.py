"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradsuite, harness
from .config import ConfigError, ExperimentConfig, load_config
from .data_io import DataError, DegenerateInputError, FormatError
from .metrics import ValidationError
from .tensor import ShapeError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return cfg.resolve(cfg.paths.output_dir) or Path("runs")


def _fmt(x):
    return "NA" if x is None else f"{x:.6f}"


def run_train(args) -> int:
    cfg = _config(args)
    report = harness.cmd_train(cfg, _out(args, cfg))
    print(report.text, end="")
    return EXIT_OK


def run_eval(args) -> int:
    cfg = _config(args)
    report = harness.cmd_eval(args.checkpoint, args.manifest, args.mode, _out(args, cfg), cfg)
    print(report.summary, end="")
    return EXIT_OK


def run_discriminate(args) -> int:
    cfg = _config(args)
    exclusions = args.exclusions or cfg.resolve(cfg.paths.exclusions)
    stats = harness.cmd_discriminate(args.checkpoint, args.manifest, exclusions, _out(args, cfg), cfg)
    print(f"accuracy\t{_fmt(stats.accuracy)}\nsensitivity\t{_fmt(stats.sensitivity)}\nppv\t{_fmt(stats.ppv)}")
    return EXIT_OK


def run_augment(args) -> int:
    cfg = _config(args)
    manifest = harness.cmd_augment(cfg, _out(args, cfg))
    print(manifest)
    return EXIT_OK


def run_gradcheck(args) -> int:
    reports = harness.cmd_gradcheck(args.seed or 0)
    table = gradsuite.format_reports(reports)
    print(table)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(table + "\n")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def run_param_count(args) -> int:
    cfg = _config(args)
    width = args.base_width or cfg.model.base_width
    cpb = cfg.model.cpb_enabled and not args.no_cpb
    result = harness.cmd_param_count(width, cpb)
    text = result.to_text()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "param_ledger.tsv").write_text(text)
    return EXIT_OK if result.ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesionseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", type=Path)
        p.add_argument("--out", type=Path)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="split or k-fold training with per-fold test evaluation")
    common(p)
    p.set_defaults(func=run_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--mode", choices=("slice", "volume"), default="slice")
    p.set_defaults(func=run_eval)

    p = sub.add_parser("discriminate", help="slice-level infected/clean discrimination")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--exclusions", type=Path)
    p.set_defaults(func=run_discriminate)

    p = sub.add_parser("augment", help="generate a synthetic lesion corpus")
    common(p)
    p.set_defaults(func=run_augment)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive and loss")
    common(p, config=False)
    p.set_defaults(func=run_gradcheck)

    p = sub.add_parser("param-count", help="per-layer trainable parameter ledger")
    common(p)
    p.add_argument("--base-width", type=int)
    p.add_argument("--no-cpb", action="store_true")
    p.set_defaults(func=run_param_count)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, DegenerateInputError, ShapeError, ValidationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
