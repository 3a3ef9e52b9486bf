"""Image-level similarity metrics and the audit feature (model scores || reference similarities)."""

from __future__ import annotations

import warnings
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, FeatureLayoutError
from .extractors import SimpleCNN

METRICS = ("mse", "cossim", "ssim", "lpips")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def cos_sim(x, y) -> float:
    x, y = _pair(x, y)
    x, y = x.ravel(), y.ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        warnings.warn("cos_sim of a zero-norm image is defined as 0", stacklevel=2)
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering over the last two axes."""
    a = sliding_window_view(a, len(g), axis=-1) @ g
    a = sliding_window_view(a, len(g), axis=-2) @ g
    return a


def ssim_map(x, y, data_range: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x, y = _pair(x, y)
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {x.shape[-2]}x{x.shape[-1]} is smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    # l*c*s with alpha=beta=gamma=1 and C3=C2/2 collapses to this form
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over 11x11 Gaussian (sigma 1.5) windows, averaged across channels."""
    return float(ssim_map(x, y, data_range).mean())


# ---------------------------------------------------------------------------
# perceptual distance
# ---------------------------------------------------------------------------

class PerceptualBackbone(torch.nn.Module):
    """Fixed random-weight 4-block CNN tapped after every block."""

    def __init__(self, width: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = SimpleCNN(width, batch_norm=False)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for block in self.net.features:
            x = block(x)
            taps.append(x)
        return taps


_default_backbone: PerceptualBackbone | None = None
DEFAULT = "default"


def default_backbone() -> PerceptualBackbone:
    global _default_backbone
    if _default_backbone is None:
        _default_backbone = PerceptualBackbone()
    return _default_backbone


def _resolve_backbone(backbone):
    if backbone is None:
        raise ConfigurationError("perceptual distance needs a backbone")
    return default_backbone() if isinstance(backbone, str) and backbone == DEFAULT else backbone


def _unit(f: torch.Tensor) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)


@torch.no_grad()
def perceptual_pairwise(a, b, backbone=DEFAULT) -> np.ndarray:
    """(n, m) perceptual distances between image batches a (n,3,H,W) and b (m,3,H,W)."""
    bb = _resolve_backbone(backbone)
    ta = bb(torch.as_tensor(np.asarray(a, dtype=np.float32)))
    tb = bb(torch.as_tensor(np.asarray(b, dtype=np.float32)))
    total = torch.zeros(len(ta[0]), len(tb[0]), dtype=torch.float64)
    for fa, fb in zip(ta, tb):
        ua, ub = _unit(fa).double(), _unit(fb).double()
        d = ((ua[:, None] - ub[None, :]) ** 2).sum(2).mean(dim=(-2, -1))
        total += d
    return (total / len(ta)).numpy()


def perceptual_distance(x, y, backbone=DEFAULT) -> float:
    """LPIPS-style distance: channel-unit-normalised activations, squared diff, spatial and layer mean."""
    x, y = _pair(x, y)
    if np.array_equal(x, y):
        return 0.0
    return float(perceptual_pairwise(x[None], y[None], backbone)[0, 0])


# ---------------------------------------------------------------------------
# pairwise matrices + reference feature
# ---------------------------------------------------------------------------

def pairwise(metric: str, a: np.ndarray, b: np.ndarray, backbone=DEFAULT) -> np.ndarray:
    """(n, m) matrix metric(a_i, b_j) for image stacks a (n,3,H,W) and b (m,3,H,W)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"shape mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    if metric == "mse":
        fa, fb = a.reshape(len(a), -1), b.reshape(len(b), -1)
        return ((fa[:, None, :] - fb[None, :, :]) ** 2).mean(-1)
    if metric == "cossim":
        fa, fb = a.reshape(len(a), -1), b.reshape(len(b), -1)
        na, nb = np.linalg.norm(fa, axis=1), np.linalg.norm(fb, axis=1)
        if (na == 0).any() or (nb == 0).any():
            warnings.warn("cos_sim of a zero-norm image is defined as 0", stacklevel=2)
        denom = np.outer(na, nb)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(denom > 0, (fa @ fb.T) / np.where(denom > 0, denom, 1.0), 0.0)
        return np.clip(out, -1.0, 1.0)
    if metric == "ssim":
        x, y = np.broadcast_arrays(a[:, None], b[None, :])
        return ssim_map(x, y).mean(axis=(-3, -2, -1))
    if metric == "lpips":
        out = perceptual_pairwise(a, b, backbone)
        same = np.array([[np.array_equal(x, y) for y in b] for x in a])
        out[same] = 0.0
        return out
    raise ConfigurationError(f"unsupported metric {metric!r}; expected one of {METRICS}")


METRIC_FUNCS: dict[str, Callable] = {"mse": mse, "cossim": cos_sim, "ssim": ssim, "lpips": perceptual_distance}


def reference_feature(queries, supports=None, metric: str = "cossim", backbone=DEFAULT) -> np.ndarray:
    """Entry j is the mean of metric(query_j, support_i) over the target-way supports, on raw pixels.

    ``queries`` may also be a probe (anything with ``queries`` and ``support``
    image lists, way 0 being the target), in which case ``supports`` is omitted.
    """
    if hasattr(queries, "queries") and hasattr(queries, "support"):
        probe = queries
        queries = np.stack([im.pixels for im in probe.queries])
        supports = np.stack([im.pixels for im in probe.support[0]])
    if metric not in METRICS:
        raise ConfigurationError(f"unsupported metric {metric!r}; expected one of {METRICS}")
    return pairwise(metric, queries, supports, backbone).mean(axis=1)


@dataclass
class AuditFeature:
    basic: np.ndarray
    reference: np.ndarray | None = None
    metric: str | None = None

    @property
    def q(self) -> int:
        return len(self.basic)

    @property
    def vector(self) -> np.ndarray:
        if self.reference is None:
            return np.asarray(self.basic, dtype=np.float64)
        return np.concatenate([self.basic, self.reference]).astype(np.float64)

    def __len__(self) -> int:
        return len(self.vector)

    def without_reference(self) -> "AuditFeature":
        return AuditFeature(np.array(self.basic, copy=True))

    def to_dict(self) -> dict:
        return {
            "basic": [float(v) for v in self.basic],
            "reference": None if self.reference is None else [float(v) for v in self.reference],
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditFeature":
        ref = d.get("reference")
        return cls(np.asarray(d["basic"], dtype=np.float64), None if ref is None else np.asarray(ref, dtype=np.float64), d.get("metric"))


_RANGES = {"cossim": (-1.0, 1.0), "ssim": (-1.0, 1.0), "mse": (0.0, np.inf), "lpips": (0.0, np.inf)}


def assemble_feature(basic: Sequence[float], reference: Sequence[float] | None = None, metric: str | None = None) -> AuditFeature:
    basic = np.asarray(basic, dtype=np.float64)
    if not np.isfinite(basic).all():
        raise FeatureLayoutError("basic feature has non-finite entries")
    if reference is None:
        return AuditFeature(basic)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != basic.shape:
        raise FeatureLayoutError(f"basic ({len(basic)}) and reference ({len(reference)}) lengths differ")
    if metric is not None:
        lo, hi = _RANGES[metric]
        if not (np.isfinite(reference).all() and (reference >= lo - 1e-9).all() and (reference <= hi + 1e-9).all()):
            raise FeatureLayoutError(f"reference entries outside the {metric} range")
    return AuditFeature(basic, reference, metric)
