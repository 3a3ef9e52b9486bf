"""Tables, JSONL and plots from result records."""

from __future__ import annotations

import csv
import re
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .auditor import METRIC_NAMES  # noqa: E402
from .errors import ConfigurationError  # noqa: E402
from .harness import REPORT_NAMES, ResultRecord, write_jsonl  # noqa: E402

FORMATS = ("table", "jsonl", "plot")
_PNG_META = {"Software": None}


def dataset_tag(config: dict) -> str:
    syn = config.get("synthetic")
    if syn is not None:
        return f"synthetic-{syn['n_users']}x{syn['n_images']}-s{syn['seed']}"
    root = config.get("data_root") or "data"
    return Path(root).name or "data"


def _fmt(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


def _table_rows(records: Sequence[ResultRecord]) -> list[dict]:
    rows = []
    for r in records:
        row = {
            "label": r.label,
            "dataset": dataset_tag(r.config),
            "architecture": r.config.get("architecture"),
            "repetitions": len(r.seeds),
            "error": r.error or "",
        }
        for name in REPORT_NAMES:
            rep = r.reports.get(name)
            for m in METRIC_NAMES:
                row[f"{name}_{m}_mean"] = "" if rep is None or not rep.runs else f"{rep.mean[m]:.6f}"
                row[f"{name}_{m}_std"] = "" if rep is None or not rep.runs else f"{rep.std[m]:.6f}"
        for key, vals in (("train_acc", r.train_acc), ("test_acc", r.test_acc), ("overfitting", r.overfitting)):
            row[key] = f"{np.mean(vals):.6f}" if vals else ""
        rows.append(row)
    return rows


def write_table(records: Sequence[ResultRecord], out_dir: Path, stem: str) -> list[Path]:
    rows = _table_rows(records)
    flat = out_dir / f"{stem}.csv"
    with open(flat, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)

    # dataset x architecture grid of the primary AUC
    datasets = sorted({dataset_tag(r.config) for r in records})
    archs = sorted({r.config.get("architecture") for r in records})
    cell = {}
    for r in records:
        if r.error is None and r.reports:
            cell.setdefault((dataset_tag(r.config), r.config.get("architecture")), r)
    grid = out_dir / f"{stem}_grid.csv"
    with open(grid, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset"] + archs)
        for d in datasets:
            w.writerow([d] + [
                _fmt(cell[(d, a)].primary.mean["auc"], cell[(d, a)].primary.std["auc"]) if (d, a) in cell else ""
                for a in archs
            ])
    return [flat, grid]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def write_plots(records: Sequence[ResultRecord], out_dir: Path, stem: str) -> list[Path]:
    ok = [r for r in records if r.error is None and r.reports]
    paths = []
    datasets = sorted({dataset_tag(r.config) for r in ok})
    archs = sorted({r.config.get("architecture") for r in ok})
    fig, ax = plt.subplots(figsize=(max(4, 1.8 * len(datasets)), 3))
    width = 0.8 / max(1, len(archs))
    for i, a in enumerate(archs):
        xs, ys, es = [], [], []
        for j, d in enumerate(datasets):
            match = [r for r in ok if dataset_tag(r.config) == d and r.config.get("architecture") == a]
            if match:
                xs.append(j + i * width)
                ys.append(match[0].primary.mean["auc"])
                es.append(match[0].primary.std["auc"])
        ax.bar(xs, ys, width, yerr=es, label=a, capsize=2)
    ax.set_xticks([j + width * (len(archs) - 1) / 2 for j in range(len(datasets))], datasets)
    ax.set_ylim(0, 1)
    ax.set_ylabel("auditing AUC")
    ax.legend(fontsize=7)
    fig.tight_layout()
    paths.append(_save(fig, out_dir / f"{stem}_auc.png"))

    # output-noise curves, one line per architecture
    noise = [r for r in ok if re.search(r":(baseline|output_noise:[0-9.e-]+)$", r.label)]
    curves: dict[str, list[tuple[float, float]]] = {}
    for r in noise:
        delta = r.config.get("defense", {}).get("output_noise", 0.0)
        curves.setdefault(r.config.get("architecture"), []).append((delta, r.primary.median("auc")))
    if any(len(v) > 1 for v in curves.values()):
        fig, ax = plt.subplots(figsize=(4, 3))
        for a in sorted(curves):
            pts = sorted(curves[a])
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=a)
        ax.set_xlabel("output noise δ")
        ax.set_ylabel("median auditing AUC")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=7)
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"{stem}_output_noise.png"))
    return paths


def emit_report(records: Sequence[ResultRecord], fmt: str, out_dir: str | Path, stem: str = "results") -> list[Path]:
    """Write ``records`` in one format; file names depend only on ``stem`` and the format."""
    if not records:
        raise ConfigurationError("no records to report")
    if fmt not in FORMATS:
        raise ConfigurationError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "jsonl":
        return [write_jsonl(records, out / f"{stem}.jsonl")]
    if fmt == "table":
        return write_table(records, out, stem)
    return write_plots(records, out, stem)
