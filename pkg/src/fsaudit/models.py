"""Metric-based few-shot recognizers (Siamese, prototypical, relation) and their trainers."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Episode, FaceImage, sample_episode, stack_pixels
from .defenses import DpConfig, clip_gradient, dp_noise
from .errors import CheckpointKindError, ConfigurationError, TrainingDivergedError
from .extractors import Extractor, build_extractor, conv_block
from .seeding import as_rng, derive_seed

logger = logging.getLogger(__name__)

KINDS = ("siamese", "proto", "relation")


class FewShotModel(nn.Module):
    kind = "base"

    def __init__(self, extractor: Extractor):
        super().__init__()
        self.extractor = extractor
        self.meta: dict = {}

    @property
    def image_size(self) -> int | None:
        return self.meta.get("image_size")

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
        size = self.image_size
        if size is not None and (x.shape[2] != size or x.shape[3] != size):
            raise ValueError(f"model expects {size}x{size} images, got {x.shape[2]}x{x.shape[3]}")
        return x

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self.extractor.embed(self._check(x))

    def way_scores(self, support: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """(k, shots, 3, H, W) support and (n, 3, H, W) queries -> (n, k) scores in [0, 1]."""
        raise NotImplementedError


class SiameseNet(FewShotModel):
    kind = "siamese"

    def __init__(self, extractor: Extractor, reduction: str = "mean"):
        super().__init__(extractor)
        self.pair_head = nn.Linear(extractor.embedding_dim, 1)
        if reduction not in ("mean", "max"):
            raise ConfigurationError(f"unknown Siamese reduction {reduction!r}")
        self.reduction = reduction

    def pair_logits(self, ea: torch.Tensor, eb: torch.Tensor) -> torch.Tensor:
        return self.pair_head(torch.abs(ea - eb)).squeeze(-1)

    def score(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Similarity of paired images, shape (n,)."""
        return torch.sigmoid(self.pair_logits(self.embed(a), self.embed(b)))

    def verify(self, a: torch.Tensor, b: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
        """Open-set verification: same identity iff the pair score exceeds ``threshold``."""
        return self.score(a, b) > threshold

    def pair_matrix(self, queries: torch.Tensor, supports: torch.Tensor) -> torch.Tensor:
        """(n, m) matrix of pair scores between n queries and m supports."""
        eq, es = self.embed(queries), self.embed(supports)
        return torch.sigmoid(self.pair_logits(eq[:, None, :], es[None, :, :]))

    def way_scores(self, support, queries):
        k, shots = support.shape[:2]
        m = self.pair_matrix(queries, support.reshape(k * shots, *support.shape[2:]))
        m = m.reshape(len(queries), k, shots)
        return m.mean(-1) if self.reduction == "mean" else m.amax(-1)


class ProtoNet(FewShotModel):
    kind = "proto"

    def logits(self, support, queries):
        """Negative squared Euclidean distances from queries to way prototypes, (n, k)."""
        k, shots = support.shape[:2]
        if shots == 0:
            raise ValueError("every way needs at least one support image")
        x = torch.cat([support.reshape(k * shots, *support.shape[2:]), queries])
        emb = self.embed(x)
        protos = emb[: k * shots].reshape(k, shots, -1).mean(1)
        eq = emb[k * shots:]
        return -((eq[:, None, :] - protos[None, :, :]) ** 2).sum(-1)

    def way_scores(self, support, queries):
        return torch.softmax(self.logits(support, queries), dim=-1)


class RelationNet(FewShotModel):
    kind = "relation"

    def __init__(self, extractor: Extractor, hidden: int = 8):
        super().__init__(extractor)
        w = extractor.embedding_dim
        self.relation_convs = nn.Sequential(conv_block(2 * w, w), conv_block(w, w))
        self.relation_fc = nn.Sequential(nn.Linear(w, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def relation_logits(self, support, queries):
        k, shots = support.shape[:2]
        if shots == 0:
            raise ValueError("every way needs at least one support image")
        x = self._check(torch.cat([support.reshape(k * shots, *support.shape[2:]), queries]))
        fmap = self.extractor.feature_map(x)
        protos = fmap[: k * shots].reshape(k, shots, *fmap.shape[1:]).mean(1)
        fq = fmap[k * shots:]
        n = fq.shape[0]
        pairs = torch.cat(
            [fq[:, None].expand(n, k, *fq.shape[1:]), protos[None].expand(n, k, *protos.shape[1:])], dim=2
        ).reshape(n * k, 2 * fmap.shape[1], *fmap.shape[2:])
        h = self.relation_convs(pairs).mean(dim=(2, 3))
        return self.relation_fc(h).reshape(n, k)

    def way_scores(self, support, queries):
        return torch.sigmoid(self.relation_logits(support, queries))


@dataclass
class TrainConfig:
    epochs: int = 30
    episodes_per_epoch: int = 100
    k: int = 5
    shots: int = 5
    queries: int = 5
    lr: float | None = None
    optimizer: str | None = None  # adam | sgd; None -> per-kind default
    momentum: float = 0.9
    scheduler_step: int = 20
    scheduler_gamma: float = 0.5
    extractor: str = "simple_cnn"
    width: int = 64
    siamese_reduction: str = "mean"
    seed: int = 0
    dp: DpConfig | None = None

    def __post_init__(self):
        for name in ("epochs", "episodes_per_epoch", "k", "shots", "queries", "scheduler_step", "width"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"TrainConfig.{name} must be positive")
        if self.lr is not None and self.lr <= 0:
            raise ConfigurationError("TrainConfig.lr must be positive")
        if isinstance(self.dp, dict):
            self.dp = DpConfig(**self.dp)

    def resolved(self, kind: str) -> tuple[str, float]:
        opt = self.optimizer or ("sgd" if kind == "proto" else "adam")
        lr = self.lr if self.lr is not None else (1e-2 if opt == "sgd" else 1e-3)
        return opt, lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dp"] = None if self.dp is None else asdict(self.dp)
        return d


def build_model(kind: str, extractor: str = "simple_cnn", width: int = 64, siamese_reduction: str = "mean") -> FewShotModel:
    if kind == "siamese":
        # ReLU + max-pool blocks without batch norm
        return SiameseNet(build_extractor(extractor, width, batch_norm=False), siamese_reduction)
    if kind == "proto":
        return ProtoNet(build_extractor(extractor, width))
    if kind == "relation":
        return RelationNet(build_extractor(extractor, width))
    raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {KINDS}")


def init_model(kind: str, config: TrainConfig, image_size: int | None = None) -> FewShotModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, f"init/{kind}"))
        model = build_model(kind, config.extractor, config.width, config.siamese_reduction)
    model.meta = {
        "kind": kind,
        "extractor": config.extractor,
        "width": config.width,
        "siamese_reduction": config.siamese_reduction,
        "image_size": image_size,
        "train_config": config.to_dict(),
        "seed": config.seed,
        "loss_history": [],
    }
    return model


def episode_tensors(ep: Episode) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Support (k, shots, 3, H, W), flattened queries (k*q, 3, H, W), and their way labels."""
    k, shots, nq = ep.k, ep.shots, ep.n_queries
    support = stack_pixels([im for way in ep.support for im in way])
    support = support.reshape(k, shots, *support.shape[1:])
    queries = stack_pixels([im for way in ep.queries for im in way])
    labels = torch.arange(k).repeat_interleave(nq)
    return support, queries, labels


def episode_loss(
    model: FewShotModel,
    support: torch.Tensor,
    queries: torch.Tensor,
    labels: torch.Tensor,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Per-kind training loss for one episode.

    Siamese: BCE over balanced positive/negative support-query pairs.
    Proto: cross-entropy of posteriors against the way index.
    Relation: MSE of relation scores against the one-hot way indicator.
    """
    k, shots = support.shape[:2]
    if isinstance(model, SiameseNet):
        flat = support.reshape(k * shots, *support.shape[2:])
        emb = model.embed(torch.cat([flat, queries]))
        es, eq = emb[: k * shots], emb[k * shots:]
        s_way = torch.arange(k).repeat_interleave(shots)
        same = (labels[:, None] == s_way[None, :]).numpy()
        pos = np.argwhere(same)
        neg = np.argwhere(~same)
        if rng is not None and len(neg) > len(pos):
            neg = neg[np.sort(rng.choice(len(neg), size=len(pos), replace=False))]
        pairs = np.concatenate([pos, neg])
        target = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(emb.dtype)
        qi, si = torch.from_numpy(pairs[:, 0]), torch.from_numpy(pairs[:, 1])
        return F.binary_cross_entropy_with_logits(model.pair_logits(eq[qi], es[si]), target)
    if isinstance(model, ProtoNet):
        return F.cross_entropy(model.logits(support, queries), labels)
    if isinstance(model, RelationNet):
        scores = torch.sigmoid(model.relation_logits(support, queries))
        return F.mse_loss(scores, F.one_hot(labels, k).to(scores.dtype))
    raise TypeError(f"unsupported model {type(model).__name__}")


def _flat_grad(model: nn.Module) -> np.ndarray:
    return np.concatenate([
        (p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1).double().numpy()
        for p in model.parameters() if p.requires_grad
    ])


def _set_flat_grad(model: nn.Module, flat: np.ndarray) -> None:
    offset = 0
    for p in model.parameters():
        if not p.requires_grad:
            continue
        n = p.numel()
        p.grad = torch.from_numpy(flat[offset: offset + n].reshape(p.shape)).to(p.dtype)
        offset += n


def train_model(
    kind: str,
    pool: Mapping[str, Sequence[FaceImage]],
    config: TrainConfig,
) -> FewShotModel:
    """Episodic training on ``pool`` (user -> training images).

    With ``config.dp`` set, every step clips the whole episode gradient to
    ``dp.clip_norm`` and adds Gaussian noise of std ``clip_norm * noise_multiplier``
    before the optimizer sees it.
    """
    if not pool:
        raise ConfigurationError("empty training pool")
    image_size = next(iter(next(iter(pool.values())))).size
    model = init_model(kind, config, image_size)
    opt_name, lr = config.resolved(kind)
    if opt_name == "sgd":
        optimizer = torch.optim.SGD(model.parameters(), lr=lr, momentum=config.momentum)
    elif opt_name == "adam":
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    else:
        raise ConfigurationError(f"unknown optimizer {opt_name!r}")
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, config.scheduler_step, config.scheduler_gamma)
    rng = as_rng(derive_seed(config.seed, f"episodes/{kind}"))
    dp = config.dp if (config.dp is not None and config.dp.active) else None
    noise_rng = as_rng(derive_seed(config.seed, "dp-noise")) if dp else None
    dp_log: list[tuple[float, float]] = []
    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(config.seed, f"torch/{kind}"))
        model.train()
        for epoch in range(config.epochs):
            total = 0.0
            for step in range(config.episodes_per_epoch):
                ep = sample_episode(pool, config.k, config.shots, config.queries, rng)
                support, queries, labels = episode_tensors(ep)
                optimizer.zero_grad()
                loss = episode_loss(model, support, queries, labels, rng)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"{kind}: non-finite loss {loss.item()} at epoch {epoch} episode {step} (lr={lr})"
                    )
                loss.backward()
                if dp is not None:
                    g = _flat_grad(model)
                    clipped = clip_gradient(g, dp.clip_norm)
                    post = float(np.linalg.norm(clipped))
                    assert post <= dp.clip_norm * (1 + 1e-9), post
                    dp_log.append((float(np.linalg.norm(g)), post))
                    _set_flat_grad(model, dp_noise(clipped, dp.clip_norm, dp.noise_multiplier, noise_rng))
                optimizer.step()
                total += loss.item()
            history.append(total / config.episodes_per_epoch)
            scheduler.step()
            logger.debug("%s epoch %d loss %.4f", kind, epoch, history[-1])
    model.eval()
    model.meta["loss_history"] = history
    if dp is not None:
        model.meta["dp"] = {
            **asdict(dp),
            "clipping": "per-episode",
            "max_pre_noise_norm": max(p for _, p in dp_log),
            "steps": len(dp_log),
        }
        model.dp_norm_log = dp_log
    return model


@torch.no_grad()
def evaluate_accuracy(
    model: FewShotModel,
    pool: Mapping[str, Sequence[FaceImage]],
    k: int,
    shots: int,
    queries: int,
    episodes: int,
    seed: int | np.random.Generator,
) -> float:
    """Identification accuracy: each query is assigned the arg-max way."""
    rng = as_rng(seed)
    model.eval()
    correct = total = 0
    for _ in range(episodes):
        ep = sample_episode(pool, k, shots, queries, rng)
        support, q, labels = episode_tensors(ep)
        pred = model.way_scores(support, q).argmax(-1)
        correct += int((pred == labels).sum())
        total += len(labels)
    return correct / total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: FewShotModel, path: str | Path) -> None:
    torch.save({"format": "fsaudit-model/1", "meta": model.meta, "state_dict": model.state_dict()}, path)


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> FewShotModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != "fsaudit-model/1":
        raise CheckpointKindError(f"{path} is not an fsaudit model checkpoint")
    meta = blob["meta"]
    if expected_kind is not None and meta["kind"] != expected_kind:
        raise CheckpointKindError(f"checkpoint holds a {meta['kind']!r} model, expected {expected_kind!r}")
    model = build_model(meta["kind"], meta["extractor"], meta["width"], meta.get("siamese_reduction", "mean"))
    model.load_state_dict(blob["state_dict"])
    model.meta = meta
    model.eval()
    return model
