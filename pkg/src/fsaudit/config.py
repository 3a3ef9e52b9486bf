"""Experiment configuration: YAML files plus ``key=value`` overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .defenses import CLOAK_LEVELS, DP_LEVELS
from .errors import ConfigurationError
from .extractors import EXTRACTORS
from .metrics import METRICS
from .models import KINDS
from .probing import STRATEGIES
from .synthetic import SyntheticSpec

DATA_ROOT_ENV = "FSAUDIT_DATA_ROOT"


@dataclass
class DefenseConfig:
    """Defenses applied to every model in a run (shadow and target alike)."""

    dp: str = "off"  # off | low | middle | high
    dp_clip: float = 1.0
    cloak: str = "off"  # off | low | middle | high
    cloak_steps: int = 40
    output_noise: float = 0.0
    memguard: bool = False

    def __post_init__(self):
        if self.dp != "off" and self.dp not in DP_LEVELS:
            raise ConfigurationError(f"unknown DP level {self.dp!r}")
        if self.cloak != "off" and self.cloak not in CLOAK_LEVELS:
            raise ConfigurationError(f"unknown cloak level {self.cloak!r}")
        if self.output_noise < 0:
            raise ConfigurationError("output_noise must be >= 0")

    @property
    def active(self) -> bool:
        return self.dp != "off" or self.cloak != "off" or self.output_noise > 0 or self.memguard


@dataclass
class RobustnessPlan:
    dp_levels: list[str] = field(default_factory=lambda: ["low", "middle", "high"])
    cloak_levels: list[str] = field(default_factory=lambda: ["low", "middle", "high"])
    noise_deltas: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2, 0.5])
    memguard: bool = True


@dataclass
class ExperimentConfig:
    # data
    data_root: str | None = None
    synthetic: SyntheticSpec | None = None
    min_images: int = 100
    keep_images: int = 100
    image_size: int = 96
    # model under audit
    architecture: str = "siamese"
    extractor: str = "simple_cnn"
    width: int = 64
    k: int = 5
    shots: int = 5
    queries: int = 5
    epochs: int = 30
    episodes_per_epoch: int = 100
    lr: float | None = None
    optimizer: str | None = None
    siamese_reduction: str = "mean"
    eval_episodes: int = 500
    # probing / auditor
    strategy: str = "random"
    rank_metric: str = "cossim"
    metric: str = "cossim"
    use_reference: bool = True
    probes_per_user: int = 10
    auditor_epochs: int = 200
    auditor_lr: float = 3e-3
    # protocol
    repetitions: int = 10
    seed: int = 0
    out_dir: str = "runs"
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    robustness: RobustnessPlan = field(default_factory=RobustnessPlan)

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec.from_dict(self.synthetic)
        if isinstance(self.defense, dict):
            self.defense = DefenseConfig(**self.defense)
        if isinstance(self.robustness, dict):
            self.robustness = RobustnessPlan(**self.robustness)
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.architecture in KINDS, f"architecture {self.architecture!r} not in {KINDS}"),
            (self.extractor in EXTRACTORS, f"extractor {self.extractor!r} not in {EXTRACTORS}"),
            (self.strategy in STRATEGIES, f"strategy {self.strategy!r} not in {STRATEGIES}"),
            (self.metric in METRICS, f"metric {self.metric!r} not in {METRICS}"),
            (self.rank_metric in METRICS, f"rank_metric {self.rank_metric!r} not in {METRICS}"),
            (self.repetitions >= 1, "repetitions must be >= 1"),
            (min(self.k, self.shots, self.queries, self.probes_per_user, self.image_size) >= 1,
             "k, shots, queries, probes_per_user and image_size must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)

    def resolved_data_root(self) -> str | None:
        if self.synthetic is not None:
            return None
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        if root is None:
            raise ConfigurationError(f"no dataset: set data_root, {DATA_ROOT_ENV}, or a synthetic spec")
        return root

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = None if self.synthetic is None else self.synthetic.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def desk_preset(**overrides) -> ExperimentConfig:
    """Synthetic 40-identity corpus sized for a single CPU core."""
    base = dict(
        synthetic=SyntheticSpec(n_users=40, n_images=20, size=32, seed=0),
        min_images=20,
        keep_images=20,
        image_size=32,
        width=32,
        epochs=20,
        episodes_per_epoch=40,
        eval_episodes=100,
        repetitions=5,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(d: dict, pairs: list[str]) -> dict:
    """Apply ``a.b=value`` overrides (values parsed as YAML scalars) to a nested dict."""
    d = dict(d)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        parts = key.strip().split(".")
        cur = d
        for p in parts[:-1]:
            nxt = cur.get(p)
            nxt = dict(nxt) if isinstance(nxt, dict) else ({} if nxt is None else asdict(nxt))
            cur[p] = nxt
            cur = nxt
        cur[parts[-1]] = _parse_value(value)
    return d


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    d: dict = {}
    if path is not None:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        if d.pop("preset", None) == "desk":
            d = {**desk_preset().to_dict(), **d}
    return ExperimentConfig.from_dict(apply_overrides(d, overrides or []))
