"""Perturbation mechanisms used to stress the auditor.

* input cloaking: PGD on a surrogate embedding (stand-in for Fawkes-style cloaks)
* DP-SGD primitives: gradient clipping and Gaussian noise
* output perturbation: additive Laplace noise on emitted scores
* MemGuard-style label-preserving perturbation of a score vector
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .seeding import as_rng

logger = logging.getLogger(__name__)

DP_LEVELS = {"low": 0.5, "middle": 1.0, "high": 2.0}
CLOAK_LEVELS = {"low": 2 / 255, "middle": 4 / 255, "high": 8 / 255}
OUTPUT_NOISE_LEVELS = (0.01, 0.05, 0.1, 0.2, 0.5)
MEMGUARD_MARGIN = 1e-3


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    level: str = "off"

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")

    @property
    def active(self) -> bool:
        return self.level != "off"

    @classmethod
    def preset(cls, level: str, clip_norm: float = 1.0) -> "DpConfig":
        if level == "off":
            return cls(clip_norm, 0.0, "off")
        return cls(clip_norm, DP_LEVELS[level], level)


@dataclass(frozen=True)
class CloakConfig:
    level: str = "low"
    epsilon: float = CLOAK_LEVELS["low"]
    steps: int = 40
    step_size: float | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("cloak epsilon must lie in (0, 1)")
        if self.steps <= 0:
            raise ValueError("cloak steps must be positive")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10

    @classmethod
    def preset(cls, level: str, steps: int = 40) -> "CloakConfig":
        return cls(level, CLOAK_LEVELS[level], steps)


@dataclass(frozen=True)
class OutputNoiseConfig:
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


def clip_gradient(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``g`` by ``1 / max(1, ||g||_2 / clip_norm)``."""
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    return g / max(1.0, norm / clip_norm)


def dp_noise(g: np.ndarray, clip_norm: float, noise_multiplier: float, seed: int | np.random.Generator) -> np.ndarray:
    """Add N(0, (clip_norm * noise_multiplier)^2) to each coordinate of an already clipped gradient."""
    g = np.asarray(g, dtype=np.float64)
    if noise_multiplier == 0:
        return g.copy()
    rng = as_rng(seed)
    return g + rng.normal(0.0, clip_norm * noise_multiplier, size=g.shape)


def perturb_output(scores: np.ndarray, config: OutputNoiseConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add i.i.d. zero-mean Laplace noise with standard deviation ``config.delta``.

    The Laplace scale is delta / sqrt(2). Draws are proportional to delta for a
    fixed seed, so noise levels share one underlying realisation.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if config.delta == 0:
        return scores.copy()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    return scores + rng.laplace(0.0, config.delta / np.sqrt(2.0), size=scores.shape)


class MemGuardResult(NamedTuple):
    scores: np.ndarray
    applied: bool


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def memguard_perturb(scores: np.ndarray, margin: float = MEMGUARD_MARGIN, target: int = 0) -> MemGuardResult:
    """Push the target-way score as far as the predicted label allows, then softmax.

    If the target way is the arg-max its score drops to ``runner_up + margin``;
    otherwise it rises to ``max - margin``. Vectors with a tie at the arg-max are
    returned unchanged with ``applied=False``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 2:
        raise ValueError("memguard_perturb needs a score vector with k >= 2")
    order = np.argsort(-s, kind="stable")
    top, runner = s[order[0]], s[order[1]]
    if top == runner:
        return MemGuardResult(s.copy(), False)
    out = s.copy()
    if order[0] == target:
        out[target] = runner + margin
    else:
        out[target] = top - margin
    return MemGuardResult(_softmax(out), True)


def _box(orig: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounds whose float64 distance from ``orig`` never exceeds ``eps``."""
    lo, hi = orig - eps, orig + eps
    while (bad := orig - lo > eps).any():
        lo[bad] = np.nextafter(lo[bad], np.inf)
    while (bad := hi - orig > eps).any():
        hi[bad] = np.nextafter(hi[bad], -np.inf)
    return lo, hi


def cloak_images(
    images: np.ndarray,
    surrogate: torch.nn.Module,
    config: CloakConfig,
    seed: int,
    return_trace: bool = False,
):
    """Projected-gradient ascent on the surrogate embedding distance from the originals.

    ``images`` is (n, 3, H, W) in [0, 1]. Output stays within ``config.epsilon``
    of the input in l-inf and inside [0, 1]. Step 0 is a seeded uniform start in
    the budget; the best iterate per image is kept.
    """
    orig = np.asarray(images, dtype=np.float64)
    x0 = torch.as_tensor(orig.astype(np.float32))
    eps, alpha = config.epsilon, config.alpha
    gen = torch.Generator().manual_seed(int(seed))
    surrogate.eval()
    for p in surrogate.parameters():
        p.requires_grad_(False)
    embed = surrogate.embed if hasattr(surrogate, "embed") else surrogate
    with torch.no_grad():
        e0 = embed(x0)
        x = (x0 + (torch.rand(x0.shape, generator=gen) * 2 - 1) * eps).clamp(0, 1)
        d_start = ((embed(x) - e0) ** 2).sum(-1)
    best, best_d = x.clone(), d_start.clone()
    for _ in range(config.steps):
        x.requires_grad_(True)
        d = ((embed(x) - e0) ** 2).sum(-1)
        (grad,) = torch.autograd.grad(d.sum(), x)
        if not torch.isfinite(grad).all():
            raise FloatingPointError("non-finite gradient while cloaking")
        with torch.no_grad():
            x = x + alpha * grad.sign()
            x = torch.min(torch.max(x, x0 - eps), x0 + eps).clamp(0, 1)
            d_new = ((embed(x) - e0) ** 2).sum(-1)
            improved = d_new > best_d
            best[improved] = x[improved]
            best_d = torch.where(improved, d_new, best_d)
    # float32 rounding can overshoot the box by an ulp
    lo, hi = _box(orig, eps)
    out = np.clip(np.clip(best.numpy().astype(np.float64), lo, hi), 0.0, 1.0)
    if return_trace:
        return out, d_start.sqrt().numpy(), best_d.sqrt().numpy()
    return out
