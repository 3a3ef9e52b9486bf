"""User-level membership classifier: audit-set construction, training, prediction, evaluation."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata
from torch import nn

from .data import DatasetSplit, FaceImage, stack_pixels
from .errors import ConfigurationError, FeatureLayoutError
from .metrics import AuditFeature, METRICS, assemble_feature, reference_feature
from .models import FewShotModel
from .probing import ProbeSet, ScoreService, audit_label, build_probe, collect_scores
from .seeding import as_rng, derive_seed

MEMBER, NONMEMBER = 1, 0
METRIC_NAMES = ("accuracy", "auc", "f1", "fpr")


@dataclass
class ProbeConfig:
    architecture: str = "siamese"
    k: int = 5
    shots: int = 5
    queries: int = 5
    strategy: str = "random"
    rank_metric: str = "cossim"
    metric: str = "cossim"
    probes_per_user: int = 10

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigurationError(f"unknown reference metric {self.metric!r}")
        if min(self.k, self.shots, self.queries, self.probes_per_user) <= 0:
            raise ConfigurationError("k, shots, queries and probes_per_user must be positive")


@dataclass
class AuditSample:
    feature: AuditFeature
    label: int
    target_user_id: str
    provenance: str  # "shadow" | "target"
    probe: ProbeSet | None = None
    li_feature: np.ndarray | None = None

    @property
    def probe_id(self) -> str:
        return f"{self.provenance}:{self.target_user_id}:{self.probe.seed if self.probe else '-'}"


def balanced_plan(split: DatasetSplit, half: str, probes_per_user: int, seed: int) -> list[tuple[str, int]]:
    """(user, probe index) pairs with equal member and non-member counts.

    Each label gets ``probes_per_user`` probes per user of the smaller group.
    The larger group's users share the same total round-robin (in a seeded
    order), so every user contributes and the counts match exactly.
    """
    h = split.half(half)
    groups = [sorted(h.mem_users), sorted(h.nonmem_users)]
    total = probes_per_user * min(len(g) for g in groups)
    rng = as_rng(derive_seed(seed, f"balance/{half}"))
    plan = []
    for users in groups:
        order = [users[i] for i in rng.permutation(len(users))]
        counts = dict.fromkeys(users, 0)
        for n in range(total):
            counts[order[n % len(order)]] += 1
        plan += [(u, j) for u in users for j in range(counts[u])]
    return plan


def build_audit_dataset(
    model: FewShotModel | ScoreService,
    split: DatasetSplit,
    half: str,
    index: Mapping[tuple[str, str], FaceImage],
    config: ProbeConfig,
    seed: int,
    provenance: str = "shadow",
    li_model: FewShotModel | None = None,
) -> list[AuditSample]:
    """Probe a model trained on ``half``'s member-train images and label each probe.

    Member probes draw only on the member users' non-train images; non-member
    probes on the non-member users' images. Filler ways come from the same
    auditor-visible pool.
    """
    h = split.half(half)
    filler_pool = h.auditor_pool(index)
    samples = []
    for user, j in balanced_plan(split, half, config.probes_per_user, seed):
        if user in h.nontrain_ids:
            images = [index[(user, i)] for i in h.nontrain_ids[user]]
        else:
            images = [index[(user, i)] for i in h.nonmem_ids[user]]
        trained = set(h.train_ids.get(user, ()))
        probe = build_probe(
            config.architecture, images, filler_pool, config.k, config.shots, config.queries,
            config.strategy, derive_seed(seed, f"probe/{half}/{user}", j), config.rank_metric,
        )
        leaked = {im.image_id for im in probe.target_images} & trained
        assert not leaked, f"probe for {user} uses training images {sorted(leaked)}"
        basic = collect_scores(model, probe)
        queries = np.stack([im.pixels for im in probe.queries])
        supports = np.stack([im.pixels for im in probe.support[0]])
        ref = reference_feature(queries, supports, config.metric)
        label = MEMBER if audit_label(probe, split, half) == "member" else NONMEMBER
        li = None if li_model is None else li_baseline_features(probe.target_images, li_model)
        samples.append(AuditSample(assemble_feature(basic, ref, config.metric), label, user, provenance, probe, li))
    n_mem = sum(s.label for s in samples)
    if abs(2 * n_mem - len(samples)) > 1:
        raise ConfigurationError(f"audit set is unbalanced: {n_mem} member vs {len(samples) - n_mem} non-member")
    return samples


def feature_matrix(samples: Sequence[AuditSample], use_reference: bool = True) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.feature.vector if use_reference else s.feature.without_reference().vector for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def li_matrix(samples: Sequence[AuditSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.li_feature for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

class AuditorModel(nn.Module):
    """Three-layer MLP (two hidden layers of 100 units) with z-scored inputs."""

    def __init__(self, dim: int, hidden: int = 100, layout: dict | None = None):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("std", torch.ones(dim, dtype=torch.float64))
        self.layout = dict(layout or {})
        self.layout["dim"] = dim
        self.history: list[float] = []

    @property
    def dim(self) -> int:
        return self.layout["dim"]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = ((x.double() - self.mean) / self.std).float()
        return self.net(z).squeeze(-1)

    @torch.no_grad()
    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.array(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise FeatureLayoutError(f"auditor expects {self.dim}-dim features, got {X.shape[1]}")
        return torch.sigmoid(self(torch.from_numpy(X))).double().numpy()


def train_auditor(
    X: np.ndarray,
    y: np.ndarray,
    seed: int,
    epochs: int = 200,
    lr: float = 3e-3,
    hidden: int = 100,
    layout: dict | None = None,
) -> AuditorModel:
    """Full-batch Adam on binary cross-entropy; standardisation stats from ``X`` only."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) != len(y):
        raise FeatureLayoutError("X must be (n, d) with one label per row")
    counts = np.bincount(y.astype(np.int64), minlength=2)
    if (counts < 2).any() or len(counts) > 2:
        raise ConfigurationError(f"auditor training needs >= 2 samples per label, got counts {counts.tolist()}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, "auditor-init"))
        model = AuditorModel(X.shape[1], hidden, layout)
    std = X.std(axis=0)
    model.mean.copy_(torch.from_numpy(X.mean(axis=0)))
    model.std.copy_(torch.from_numpy(np.where(std > 0, std, 1.0)))
    xt = torch.from_numpy(X)
    yt = torch.from_numpy(y.astype(np.float32))
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    model.train()
    for _ in range(epochs):
        opt.zero_grad()
        loss = F.binary_cross_entropy_with_logits(model(xt), yt)
        loss.backward()
        opt.step()
        model.history.append(loss.item())
    model.eval()
    model.layout.update(epochs=epochs, lr=lr, optimizer="adam", seed=seed)
    return model


def predict(auditor: AuditorModel, feature: AuditFeature | np.ndarray) -> tuple[float, str]:
    """Probability of membership and the label under the >= 0.5 rule."""
    vec = feature.vector if isinstance(feature, AuditFeature) else np.asarray(feature, dtype=np.float64)
    if vec.ndim != 1:
        raise FeatureLayoutError("predict takes a single feature vector")
    p = float(auditor.predict_proba(vec[None])[0])
    return p, ("member" if p >= 0.5 else "nonmember")


def predict_batch(auditor: AuditorModel, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = auditor.predict_proba(X)
    return p, (p >= 0.5).astype(np.int64)


def save_auditor(auditor: AuditorModel, path: str | Path) -> None:
    torch.save({"format": "fsaudit-auditor/1", "layout": auditor.layout, "state_dict": auditor.state_dict()}, path)


def load_auditor(path: str | Path, expected_layout: dict | None = None) -> AuditorModel:
    """Load an auditor; ``expected_layout`` keys (q, reference, metric, ...) must match the stored ones."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    layout = blob["layout"]
    for key, value in (expected_layout or {}).items():
        if layout.get(key) != value:
            raise FeatureLayoutError(f"auditor layout mismatch on {key!r}: stored {layout.get(key)!r}, probe {value!r}")
    sd = blob["state_dict"]
    hidden = sd["net.0.weight"].shape[0]
    model = AuditorModel(layout["dim"], hidden, layout)
    model.load_state_dict(sd)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def roc_auc(y_true: np.ndarray, score: np.ndarray) -> float:
    """Mann-Whitney rank statistic with average ranks for ties."""
    y_true = np.asarray(y_true).astype(bool)
    n1, n0 = int(y_true.sum()), int((~y_true).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC is undefined for a single-class evaluation set")
    ranks = rankdata(np.asarray(score, dtype=np.float64))
    return float((ranks[y_true].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def binary_metrics(y_true: np.ndarray, prob: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    y_true = np.asarray(y_true).astype(np.int64)
    prob = np.asarray(prob, dtype=np.float64)
    pred = (prob >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (y_true == 1)).sum())
    fp = int(((pred == 1) & (y_true == 0)).sum())
    tn = int(((pred == 0) & (y_true == 0)).sum())
    fn = int(((pred == 0) & (y_true == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": (tp + tn) / len(y_true),
        "auc": roc_auc(y_true, prob),
        "f1": f1,
        "fpr": fp / (fp + tn) if fp + tn else 0.0,
    }


def evaluate(auditor: AuditorModel, X: np.ndarray, y: np.ndarray) -> dict[str, float]:
    return binary_metrics(y, auditor.predict_proba(X))


@dataclass
class EvalReport:
    runs: list[dict[str, float]] = field(default_factory=list)

    def add(self, metrics: Mapping[str, float]) -> None:
        self.runs.append({m: float(metrics[m]) for m in METRIC_NAMES})

    @property
    def mean(self) -> dict[str, float]:
        return {m: float(np.mean([r[m] for r in self.runs])) for m in METRIC_NAMES}

    @property
    def std(self) -> dict[str, float]:
        return {m: float(np.std([r[m] for r in self.runs])) for m in METRIC_NAMES}

    def median(self, metric: str = "auc") -> float:
        return float(np.median([r[metric] for r in self.runs]))

    def to_dict(self) -> dict:
        return {"runs": self.runs, "mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls([dict(r) for r in d["runs"]])


# ---------------------------------------------------------------------------
# embedding-distance baseline
# ---------------------------------------------------------------------------

def centroid_pairwise(emb: np.ndarray) -> tuple[float, float]:
    """(mean distance to centroid, mean pairwise distance) of a set of embeddings."""
    emb = np.asarray(emb, dtype=np.float64)
    if len(emb) < 2:
        raise ValueError("need at least two embeddings")
    c = np.linalg.norm(emb - emb.mean(0), axis=1).mean()
    iu = np.triu_indices(len(emb), 1)
    d = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=-1)[iu]
    return float(c), float(d.mean())


@torch.no_grad()
def li_baseline_features(images: Sequence[FaceImage], model: FewShotModel) -> np.ndarray:
    """(C_u, P_u) computed from the model's embeddings of one user's images (white-box access)."""
    if len(images) < 2:
        raise ValueError("need at least two images")
    model.eval()
    emb = model.embed(stack_pixels(images)).double().numpy()
    return np.array(centroid_pairwise(emb))
