"""End-to-end experiment orchestration with deterministic seeding and JSONL records."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .auditor import (
    EvalReport, ProbeConfig, build_audit_dataset, evaluate, feature_matrix, li_matrix, train_auditor,
)
from .config import DefenseConfig, ExperimentConfig
from .data import DatasetSplit, FaceImage, IdentityRecord, image_index, load_dataset, preprocess, split
from .defenses import CloakConfig, DpConfig, OutputNoiseConfig, cloak_images
from .errors import ConfigurationError, FsauditError, StageError
from .extractors import build_extractor
from .models import FewShotModel, TrainConfig, evaluate_accuracy, train_model
from .probing import ScoreService, probe_format
from .seeding import derive_seed
from .synthetic import make_corpus

logger = logging.getLogger(__name__)

REPORT_NAMES = ("reference", "basic", "li_baseline")
SWEEP_AXES = {"ways": "k", "shots": "shots", "queries": "queries", "image_size": "image_size", "extractor": "extractor"}


@dataclass
class ResultRecord:
    """Everything needed to read, tabulate or replay one experiment cell."""

    label: str
    config: dict
    shadow_config: dict | None = None
    reports: dict[str, EvalReport] = field(default_factory=dict)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    wall_clock: float = 0.0
    error: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def overfitting(self) -> list[float]:
        return [a - b for a, b in zip(self.train_acc, self.test_acc)]

    @property
    def primary(self) -> EvalReport:
        """Auditor report under the configured reference setting."""
        use_ref = self.config.get("use_reference", True)
        return self.reports["reference" if use_ref else "basic"]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config": self.config,
            "shadow_config": self.shadow_config,
            "reports": {k: v.to_dict() for k, v in self.reports.items()},
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "overfitting": self.overfitting,
            "seeds": self.seeds,
            "wall_clock": self.wall_clock,
            "error": self.error,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(
            label=d["label"],
            config=d["config"],
            shadow_config=d.get("shadow_config"),
            reports={k: EvalReport.from_dict(v) for k, v in d.get("reports", {}).items()},
            train_acc=list(d.get("train_acc", [])),
            test_acc=list(d.get("test_acc", [])),
            seeds=list(d.get("seeds", [])),
            wall_clock=d.get("wall_clock", 0.0),
            error=d.get("error"),
            extras=d.get("extras", {}),
        )


def write_jsonl(records: Sequence[ResultRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_jsonl(path: str | Path) -> list[ResultRecord]:
    with open(path) as fh:
        return [ResultRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# caches: corpora and trained models are pure functions of their config
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    records: list[IdentityRecord]
    index: dict[tuple[str, str], FaceImage]


_CORPUS_CACHE: dict[str, Corpus] = {}
_MODEL_CACHE: dict[str, FewShotModel] = {}


def clear_caches() -> None:
    _CORPUS_CACHE.clear()
    _MODEL_CACHE.clear()


def _corpus_key(cfg: ExperimentConfig) -> str:
    return json.dumps({
        "data_root": None if cfg.synthetic is not None else cfg.resolved_data_root(),
        "synthetic": None if cfg.synthetic is None else cfg.synthetic.to_dict(),
        "min_images": cfg.min_images, "keep": cfg.keep_images, "size": cfg.image_size, "seed": cfg.seed,
        "cloak": cfg.defense.cloak, "cloak_steps": cfg.defense.cloak_steps, "width": cfg.width,
    }, sort_keys=True)


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    key = _corpus_key(cfg)
    if key in _CORPUS_CACHE:
        return _CORPUS_CACHE[key]
    raw = make_corpus(cfg.synthetic) if cfg.synthetic is not None else load_dataset(cfg.resolved_data_root())
    records = preprocess(raw, cfg.min_images, cfg.keep_images, cfg.image_size, derive_seed(cfg.seed, "preprocess"))
    if cfg.defense.cloak != "off":
        records = _cloak_records(records, cfg)
    corpus = Corpus(records, image_index(records))
    _CORPUS_CACHE[key] = corpus
    return corpus


def _cloak_records(records: list[IdentityRecord], cfg: ExperimentConfig) -> list[IdentityRecord]:
    """Cloak every image before any model sees it, with a fixed surrogate extractor."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "cloak-surrogate"))
        surrogate = build_extractor("simple_cnn", cfg.width, batch_norm=False)
    cc = CloakConfig.preset(cfg.defense.cloak, cfg.defense.cloak_steps)
    out = []
    for n, rec in enumerate(records):
        pixels = cloak_images(np.stack([im.pixels for im in rec.images]), surrogate, cc, derive_seed(cfg.seed, "cloak", n))
        images = [FaceImage(p.astype(np.float32), im.user_id, im.image_id) for p, im in zip(pixels, rec.images)]
        out.append(IdentityRecord(rec.user_id, images))
    return out


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    dp = None if cfg.defense.dp == "off" else DpConfig.preset(cfg.defense.dp, cfg.defense.dp_clip)
    return TrainConfig(
        epochs=cfg.epochs, episodes_per_epoch=cfg.episodes_per_epoch, k=cfg.k, shots=cfg.shots, queries=cfg.queries,
        lr=cfg.lr, optimizer=cfg.optimizer, extractor=cfg.extractor, width=cfg.width,
        siamese_reduction=cfg.siamese_reduction, seed=seed, dp=dp,
    )


def _trained(cfg: ExperimentConfig, corpus: Corpus, sp: DatasetSplit, half: str, seed: int) -> FewShotModel:
    tc = train_config(cfg, seed)
    key = json.dumps([_corpus_key(cfg), sp.to_manifest(), half, cfg.architecture, tc.to_dict()], sort_keys=True)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = train_model(cfg.architecture, sp.half(half).train_pool(corpus.index), tc)
    return _MODEL_CACHE[key]


def _service(model: FewShotModel, defense: DefenseConfig, seed: int) -> ScoreService:
    noise = OutputNoiseConfig(defense.output_noise, seed) if defense.output_noise > 0 else None
    return ScoreService(model, noise, defense.memguard)


def probe_config(cfg: ExperimentConfig) -> ProbeConfig:
    return ProbeConfig(cfg.architecture, cfg.k, cfg.shots, cfg.queries, cfg.strategy, cfg.rank_metric, cfg.metric,
                       cfg.probes_per_user)


# ---------------------------------------------------------------------------
# one repetition
# ---------------------------------------------------------------------------

def _stage(name: str, seed: int, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with stage context
        raise StageError(name, seed, exc) from exc


def run_repetition(shadow_cfg: ExperimentConfig, target_cfg: ExperimentConfig, rep_seed: int) -> dict:
    """split -> shadow train -> audit set -> auditor -> target train -> probe -> evaluate."""
    s_corpus = _stage("load", rep_seed, load_corpus, shadow_cfg)
    t_corpus = _stage("load", rep_seed, load_corpus, target_cfg)
    s_split = _stage("split", rep_seed, split, s_corpus.records, derive_seed(rep_seed, "split"))
    t_split = s_split if t_corpus is s_corpus else _stage("split", rep_seed, split, t_corpus.records, derive_seed(rep_seed, "split"))

    shadow = _stage("shadow-train", rep_seed, _trained, shadow_cfg, s_corpus, s_split, "aux", derive_seed(rep_seed, "shadow-model"))
    s_service = _service(shadow, shadow_cfg.defense, derive_seed(rep_seed, "output-noise/shadow"))
    s_samples = _stage(
        "shadow-probe", rep_seed, build_audit_dataset, s_service, s_split, "aux", s_corpus.index,
        probe_config(shadow_cfg), derive_seed(rep_seed, "probes/shadow"), "shadow", shadow,
    )
    auditor_seed = derive_seed(rep_seed, "auditor")
    kw = dict(epochs=target_cfg.auditor_epochs, lr=target_cfg.auditor_lr)
    pc = probe_config(target_cfg)
    layout = {"q": pc.queries, "metric": pc.metric}
    auditors = {
        "reference": _stage("auditor-train", rep_seed, train_auditor, *feature_matrix(s_samples, True), auditor_seed,
                            layout={**layout, "reference": True}, **kw),
        "basic": _stage("auditor-train", rep_seed, train_auditor, *feature_matrix(s_samples, False), auditor_seed,
                        layout={**layout, "reference": False}, **kw),
        "li_baseline": _stage("auditor-train", rep_seed, train_auditor, *li_matrix(s_samples), auditor_seed,
                              layout={"li": True}, **kw),
    }

    target = _stage("target-train", rep_seed, _trained, target_cfg, t_corpus, t_split, "target", derive_seed(rep_seed, "target-model"))
    t_service = _service(target, target_cfg.defense, derive_seed(rep_seed, "output-noise/target"))
    t_samples = _stage(
        "target-probe", rep_seed, build_audit_dataset, t_service, t_split, "target", t_corpus.index,
        pc, derive_seed(rep_seed, "probes/target"), "target", target,
    )
    metrics = {
        "reference": evaluate(auditors["reference"], *feature_matrix(t_samples, True)),
        "basic": evaluate(auditors["basic"], *feature_matrix(t_samples, False)),
        "li_baseline": evaluate(auditors["li_baseline"], *li_matrix(t_samples)),
    }
    acc_seed = derive_seed(rep_seed, "accuracy")
    th = t_split.half("target")
    train_acc = _stage("target-accuracy", rep_seed, evaluate_accuracy, target, th.train_pool(t_corpus.index),
                       target_cfg.k, target_cfg.shots, target_cfg.queries, target_cfg.eval_episodes, acc_seed)
    test_acc = _stage("target-accuracy", rep_seed, evaluate_accuracy, target, th.auditor_pool(t_corpus.index),
                      target_cfg.k, target_cfg.shots, target_cfg.queries, target_cfg.eval_episodes, acc_seed)
    return {
        "metrics": metrics,
        "train_acc": train_acc,
        "test_acc": test_acc,
        "memguard": {"applied": t_service.memguard_applied, "skipped": t_service.memguard_skipped},
        "dp": target.meta.get("dp"),
        "feature_dim": int(feature_matrix(t_samples[:1], target_cfg.use_reference)[0].shape[1]),
        "n_samples": {"shadow": len(s_samples), "target": len(t_samples)},
    }


def repetition_seeds(cfg: ExperimentConfig) -> list[int]:
    return [derive_seed(cfg.seed, "repetition", r) for r in range(cfg.repetitions)]


def _run_pair(label: str, shadow_cfg: ExperimentConfig, target_cfg: ExperimentConfig) -> ResultRecord:
    start = time.perf_counter()
    rec = ResultRecord(
        label, target_cfg.to_dict(), None if shadow_cfg is target_cfg else shadow_cfg.to_dict(),
        reports={n: EvalReport() for n in REPORT_NAMES},
    )
    extras = {"memguard_applied": 0, "memguard_skipped": 0, "eval_episodes": target_cfg.eval_episodes}
    for rs in repetition_seeds(target_cfg):
        out = run_repetition(shadow_cfg, target_cfg, rs)
        for n in REPORT_NAMES:
            rec.reports[n].add(out["metrics"][n])
        rec.train_acc.append(out["train_acc"])
        rec.test_acc.append(out["test_acc"])
        rec.seeds.append(rs)
        extras["memguard_applied"] += out["memguard"]["applied"]
        extras["memguard_skipped"] += out["memguard"]["skipped"]
        extras["feature_dim"] = out["feature_dim"]
        extras["n_samples"] = out["n_samples"]
        if out["dp"] is not None:
            extras["dp"] = out["dp"]
    rec.extras = extras
    rec.wall_clock = time.perf_counter() - start
    logger.info("%s: AUC %.3f +- %.3f (%.1fs)", label, rec.primary.mean["auc"], rec.primary.std["auc"], rec.wall_clock)
    return rec


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def run_audit(cfg: ExperimentConfig, label: str | None = None) -> ResultRecord:
    return _run_pair(label or f"audit:{cfg.architecture}", cfg, cfg)


def replay(record: ResultRecord) -> ResultRecord:
    """Re-run a record from its embedded config snapshot(s)."""
    target = ExperimentConfig.from_dict(record.config)
    shadow = target if record.shadow_config is None else ExperimentConfig.from_dict(record.shadow_config)
    return _run_pair(record.label, shadow, target)


@dataclass
class TransferMatrix:
    axis: str  # dataset | model
    shadow_labels: list[str]
    target_labels: list[str]
    cells: list[list[ResultRecord]]

    def report(self, i: int, j: int) -> EvalReport:
        return self.cells[i][j].primary

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "shadow_labels": self.shadow_labels,
            "target_labels": self.target_labels,
            "cells": [[c.to_dict() for c in row] for row in self.cells],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        return cls(d["axis"], list(d["shadow_labels"]), list(d["target_labels"]),
                   [[ResultRecord.from_dict(c) for c in row] for row in d["cells"]])


def run_transfer(cfg: ExperimentConfig, axis: str, values: Sequence) -> TransferMatrix:
    """Cross matrix: shadow built on ``values[i]``, audited target built on ``values[j]``.

    ``axis="dataset"``: values are dicts of config overrides (e.g. ``{"synthetic": {...}}``)
    or (label, overrides) pairs. ``axis="model"``: values are architectures, restricted to
    proto and relation since they answer the same k-way probe format.
    """
    if axis == "model":
        for v in values:
            if probe_format(v) != "kway":
                raise ConfigurationError(
                    f"model transfer needs architectures sharing the k-way probe format; {v!r} answers pair probes only"
                )
        labels = list(values)
        cfgs = [cfg.with_overrides(architecture=v) for v in values]
    elif axis == "dataset":
        labels, cfgs = [], []
        for n, v in enumerate(values):
            name, over = v if isinstance(v, tuple) else (f"dataset{n}", v)
            labels.append(name)
            d = cfg.to_dict()
            d.update(over)
            cfgs.append(ExperimentConfig.from_dict(d))
    else:
        raise ConfigurationError(f"unknown transfer axis {axis!r}; expected 'dataset' or 'model'")
    cells = [
        [_run_pair(f"transfer:{axis}:{a}->{b}", s, s if i == j else t) for j, (b, t) in enumerate(zip(labels, cfgs))]
        for i, (a, s) in enumerate(zip(labels, cfgs))
    ]
    return TransferMatrix(axis, labels, labels, cells)


def run_sweep(cfg: ExperimentConfig, axis: str, values: Sequence) -> list[ResultRecord]:
    """One record per value with everything else, seeds included, held fixed."""
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    name = SWEEP_AXES[axis]
    out = []
    for v in values:
        label = f"sweep:{axis}={v}"
        start = time.perf_counter()
        try:
            out.append(run_audit(cfg.with_overrides(**{name: v}), label))
        except (FsauditError, ValueError) as exc:
            logger.warning("%s failed: %s", label, exc)
            d = cfg.to_dict()
            d[name] = v
            out.append(ResultRecord(label, d, error=f"{type(exc).__name__}: {exc}",
                                    wall_clock=time.perf_counter() - start))
    return out


def robustness_variants(cfg: ExperimentConfig) -> list[tuple[str, DefenseConfig]]:
    plan = cfg.robustness
    variants = [("baseline", DefenseConfig())]
    variants += [(f"cloak:{lv}", DefenseConfig(cloak=lv)) for lv in plan.cloak_levels]
    variants += [(f"dp:{lv}", DefenseConfig(dp=lv)) for lv in plan.dp_levels]
    variants += [(f"output_noise:{d:g}", DefenseConfig(output_noise=float(d))) for d in plan.noise_deltas]
    if plan.memguard:
        variants.append(("memguard", DefenseConfig(memguard=True)))
    return variants


def run_robustness(cfg: ExperimentConfig, variants: Sequence[tuple[str, DefenseConfig]] | None = None) -> list[ResultRecord]:
    """Undefended baseline plus every defense level under identical seeds.

    Each defended record carries per-repetition AUC and target-accuracy drops
    against the baseline. A failing variant is recorded and does not affect others.
    """
    variants = list(variants) if variants is not None else robustness_variants(cfg)
    if not variants or variants[0][0] != "baseline":
        variants = [("baseline", DefenseConfig())] + [v for v in variants if v[0] != "baseline"]
    records: list[ResultRecord] = []
    base: ResultRecord | None = None
    for label, defense in variants:
        c = replace(cfg, defense=defense)
        try:
            rec = run_audit(c, f"robustness:{cfg.architecture}:{label}")
        except (FsauditError, ValueError) as exc:
            logger.warning("%s failed: %s", label, exc)
            rec = ResultRecord(f"robustness:{cfg.architecture}:{label}", c.to_dict(), error=f"{type(exc).__name__}: {exc}")
            if base is None:
                raise
        if base is None:
            base = rec
        elif rec.error is None:
            rec.extras["auc_drop"] = [b["auc"] - r["auc"] for b, r in zip(base.primary.runs, rec.primary.runs)]
            rec.extras["target_acc_drop"] = [b - r for b, r in zip(base.test_acc, rec.test_acc)]
        records.append(rec)
    return records
