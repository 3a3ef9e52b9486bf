"""Probe-set construction and black-box score collection."""

from __future__ import annotations

import hashlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DatasetSplit, FaceImage, stack_pixels
from .defenses import MEMGUARD_MARGIN, OutputNoiseConfig, memguard_perturb, perturb_output
from .errors import ConfigurationError, InfeasibleSampleError, ProbeMismatchError, SplitError
from .metrics import pairwise
from .models import FewShotModel
from .seeding import as_rng

ARCHITECTURES = ("siamese", "proto", "relation")
STRATEGIES = ("random", "high_similarity", "low_similarity")
_DISTANCE_METRICS = ("mse", "lpips")


def probe_format(architecture: str) -> str:
    if architecture == "siamese":
        return "pair"
    if architecture in ("proto", "relation"):
        return "kway"
    raise ConfigurationError(f"unknown architecture {architecture!r}")


@dataclass
class ProbeSet:
    architecture: str
    target_user_id: str
    support: list[list[FaceImage]]  # way 0 is the target user
    queries: list[FaceImage]
    filler_user_ids: list[str] = field(default_factory=list)
    strategy: str = "random"
    rank_metric: str = "cossim"
    seed: int | None = None

    @property
    def k(self) -> int:
        return len(self.support)

    @property
    def shots(self) -> int:
        return len(self.support[0])

    @property
    def q(self) -> int:
        return len(self.queries)

    @property
    def target_images(self) -> list[FaceImage]:
        return list(self.support[0]) + list(self.queries)

    def support_pixels(self) -> torch.Tensor:
        flat = stack_pixels([im for way in self.support for im in way])
        return flat.reshape(self.k, self.shots, *flat.shape[1:])

    def query_pixels(self) -> torch.Tensor:
        return stack_pixels(self.queries)

    def to_manifest(self) -> dict:
        return {
            "architecture": self.architecture,
            "target": self.target_user_id,
            "support": [[[im.user_id, im.image_id] for im in way] for way in self.support],
            "queries": [im.image_id for im in self.queries],
            "fillers": list(self.filler_user_ids),
            "strategy": self.strategy,
            "rank_metric": self.rank_metric,
            "seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, m: dict, index: Mapping[tuple[str, str], FaceImage]) -> "ProbeSet":
        return cls(
            architecture=m["architecture"],
            target_user_id=m["target"],
            support=[[index[(u, i)] for u, i in way] for way in m["support"]],
            queries=[index[(m["target"], i)] for i in m["queries"]],
            filler_user_ids=list(m["fillers"]),
            strategy=m["strategy"],
            rank_metric=m.get("rank_metric", "cossim"),
            seed=m.get("seed"),
        )


def _pixels(images: Sequence[FaceImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images])


def rank_candidates(candidates: Sequence[FaceImage], supports: Sequence[FaceImage], metric: str) -> np.ndarray:
    """Candidate indices sorted from most to least similar (mean over supports)."""
    sim = pairwise(metric, _pixels(candidates), _pixels(supports)).mean(axis=1)
    if metric in _DISTANCE_METRICS:
        sim = -sim
    return np.lexsort((np.arange(len(sim)), -sim))


def build_probe(
    architecture: str,
    target_images: Sequence[FaceImage],
    filler_pool: Mapping[str, Sequence[FaceImage]] | None,
    k: int,
    shots: int,
    queries: int,
    strategy: str = "random",
    seed: int | np.random.Generator = 0,
    rank_metric: str = "cossim",
) -> ProbeSet:
    fmt = probe_format(architecture)
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown query strategy {strategy!r}")
    if not target_images:
        raise InfeasibleSampleError("target user has no images")
    target = target_images[0].user_id
    need = shots + queries
    if len(target_images) < need:
        raise InfeasibleSampleError(
            f"target {target!r} has {len(target_images)} images; probe needs {shots} support + {queries} queries"
            f" (short by {need - len(target_images)})"
        )
    seed_value = seed if isinstance(seed, (int, np.integer)) else None
    rng = as_rng(seed)
    order = rng.permutation(len(target_images))
    support = [target_images[i] for i in order[:shots]]
    candidates = [target_images[i] for i in order[shots:]]
    if strategy == "random":
        chosen = [candidates[i] for i in sorted(rng.choice(len(candidates), size=queries, replace=False))]
    else:
        ranked = rank_candidates(candidates, support, rank_metric)
        picks = ranked[:queries] if strategy == "high_similarity" else ranked[::-1][:queries]
        chosen = [candidates[i] for i in picks]

    ways = [support]
    fillers: list[str] = []
    if fmt == "kway" and k > 1:
        pool = {u: ims for u, ims in (filler_pool or {}).items() if u != target}
        eligible = sorted(u for u, ims in pool.items() if len(ims) >= shots)
        if len(eligible) < k - 1:
            raise InfeasibleSampleError(
                f"probe needs {k - 1} filler users with >= {shots} images, only {len(eligible)} available"
            )
        fillers = [eligible[i] for i in rng.choice(len(eligible), size=k - 1, replace=False)]
        for u in fillers:
            ims = pool[u]
            ways.append([ims[i] for i in rng.choice(len(ims), size=shots, replace=False)])
    return ProbeSet(architecture, target, ways, chosen, fillers, strategy, rank_metric, seed_value)


# ---------------------------------------------------------------------------
# black-box scoring
# ---------------------------------------------------------------------------

def _digest(*arrays: torch.Tensor) -> int:
    h = hashlib.sha256()
    for a in arrays:
        h.update(a.numpy().tobytes())
    return int.from_bytes(h.digest()[:8], "little")


class ScoreService:
    """What an auditor sees of a deployed recognizer: similarity scores only.

    Optional output defenses are applied to every score the model emits.
    Noise is seeded from the query content so repeated identical queries get
    identical answers.
    """

    def __init__(
        self,
        model: FewShotModel,
        output_noise: OutputNoiseConfig | None = None,
        memguard: bool = False,
        memguard_margin: float = MEMGUARD_MARGIN,
    ):
        self.model = model
        self.output_noise = output_noise
        self.memguard = memguard
        self.memguard_margin = memguard_margin
        self.memguard_skipped = 0
        self.memguard_applied = 0

    @property
    def kind(self) -> str:
        return self.model.kind

    def _noise(self, scores: np.ndarray, *inputs: torch.Tensor) -> np.ndarray:
        if self.output_noise is None or self.output_noise.delta == 0:
            return scores
        rng = np.random.default_rng([self.output_noise.seed, _digest(*inputs)])
        return perturb_output(scores, self.output_noise, rng)

    @torch.no_grad()
    def pair_scores(self, queries: torch.Tensor, supports: torch.Tensor) -> np.ndarray:
        if self.kind != "siamese":
            raise ProbeMismatchError("pair scores are only served by Siamese models")
        m = self.model.pair_matrix(queries, supports).double().numpy()
        if self.memguard:
            # a lone pair score has no competing label to preserve
            self.memguard_skipped += m.shape[0]
        return self._noise(m, queries, supports)

    @torch.no_grad()
    def way_scores(self, support: torch.Tensor, queries: torch.Tensor) -> np.ndarray:
        s = self.model.way_scores(support, queries).double().numpy()
        if self.memguard and s.shape[1] >= 2:
            rows = []
            for row in s:
                res = memguard_perturb(row, self.memguard_margin, target=0)
                self.memguard_applied += int(res.applied)
                self.memguard_skipped += int(not res.applied)
                rows.append(res.scores)
            s = np.stack(rows)
        return self._noise(s, support, queries)


def as_service(model) -> ScoreService:
    return model if isinstance(model, ScoreService) else ScoreService(model)


def collect_scores(model: FewShotModel | ScoreService, probe: ProbeSet) -> np.ndarray:
    """Basic audit feature: one target-way score per query (filler-way scores are discarded)."""
    svc = as_service(model)
    if probe_format(svc.kind) != probe_format(probe.architecture):
        raise ProbeMismatchError(f"{svc.kind} model cannot answer a {probe.architecture} probe")
    queries = probe.query_pixels()
    if svc.kind == "siamese":
        m = svc.pair_scores(queries, stack_pixels(probe.support[0]))
        red = getattr(svc.model, "reduction", "mean")
        return m.mean(axis=1) if red == "mean" else m.max(axis=1)
    return svc.way_scores(probe.support_pixels(), queries)[:, 0]


def audit_label(probe: ProbeSet, split: DatasetSplit, half: str = "target") -> str:
    """'member' iff the target user is a member user of the half the audited model was trained on."""
    h = split.half(half)
    try:
        return h.role_of(probe.target_user_id)
    except KeyError:
        raise SplitError(f"user {probe.target_user_id!r} is not part of the {half} half") from None
