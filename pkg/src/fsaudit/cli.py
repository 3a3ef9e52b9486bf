"""Command line: ``fsaudit <subcommand> --config FILE [--set key=value ...] --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ExperimentConfig, apply_overrides, desk_preset, load_config
from .errors import FsauditError
from .harness import read_jsonl, run_audit, run_robustness, run_sweep, run_transfer, write_jsonl
from .report import FORMATS, emit_report

logger = logging.getLogger("fsaudit")


def _config(args) -> ExperimentConfig:
    if args.preset == "desk":
        base = desk_preset().to_dict()
        if args.config:
            with open(args.config) as fh:
                base.update(yaml.safe_load(fh) or {})
        return ExperimentConfig.from_dict(apply_overrides(base, args.set))
    return load_config(args.config, args.set)


def _finish(records, out: Path, stem: str) -> None:
    write_jsonl(records, out / f"{stem}.jsonl")
    emit_report(records, "table", out, stem)
    for r in records:
        if r.error:
            print(f"{r.label}: ERROR {r.error}")
        else:
            p = r.primary
            print(f"{r.label}: AUC {p.mean['auc']:.3f} ± {p.std['auc']:.3f}  acc {p.mean['accuracy']:.3f}"
                  f"  F1 {p.mean['f1']:.3f}  FPR {p.mean['fpr']:.3f}")


def cmd_audit(args) -> int:
    cfg = _config(args)
    _finish([run_audit(cfg)], args.out, "audit")
    return 0


def cmd_transfer(args) -> int:
    cfg = _config(args)
    if args.axis == "model":
        values = args.values
    else:
        values = []
        for v in args.values:
            parsed = yaml.safe_load(v)
            values.append((v, parsed) if isinstance(parsed, dict) else (Path(v).name, {"data_root": v, "synthetic": None}))
    matrix = run_transfer(cfg, args.axis, values)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "transfer.json").write_text(json.dumps(matrix.to_dict(), sort_keys=True))
    _finish([c for row in matrix.cells for c in row], args.out, "transfer")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = [yaml.safe_load(v) for v in args.values]
    _finish(run_sweep(cfg, args.axis, values), args.out, f"sweep_{args.axis}")
    return 0


def cmd_robustness(args) -> int:
    cfg = _config(args)
    records = run_robustness(cfg)
    _finish(records, args.out, "robustness")
    for r in records[1:]:
        if "auc_drop" in r.extras:
            d = r.extras["auc_drop"]
            print(f"{r.label}: mean AUC drop vs baseline {sum(d) / len(d):+.3f}")
    return 0


def cmd_report(args) -> int:
    records = [r for path in args.records for r in read_jsonl(path)]
    for fmt in args.format:
        for p in emit_report(records, fmt, args.out, args.stem):
            print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsaudit", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--preset", choices=["desk"], help="start from a built-in preset")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted keys for nested fields)")
        p.add_argument("--out", type=Path, default=Path("runs"))
        return p

    experiment("audit", "train shadow/target models and audit the target").set_defaults(func=cmd_audit)

    p = experiment("transfer", "cross-dataset or cross-architecture matrix")
    p.add_argument("--axis", choices=["dataset", "model"], required=True)
    p.add_argument("--values", nargs="+", required=True,
                   help="architectures, dataset roots, or YAML override mappings")
    p.set_defaults(func=cmd_transfer)

    p = experiment("sweep", "vary one setting with everything else fixed")
    p.add_argument("--axis", choices=["ways", "shots", "queries", "image_size", "extractor"], required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.set_defaults(func=cmd_sweep)

    experiment("robustness", "baseline plus every defense level").set_defaults(func=cmd_robustness)

    p = sub.add_parser("report", help="render stored JSONL records")
    p.add_argument("records", nargs="+", type=Path)
    p.add_argument("--format", nargs="+", choices=FORMATS, default=["table"])
    p.add_argument("--stem", default="results")
    p.add_argument("--out", type=Path, default=Path("reports"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except FsauditError as exc:
        print(f"fsaudit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
