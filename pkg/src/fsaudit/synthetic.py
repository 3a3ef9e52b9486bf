"""Parametric face-like corpus for running the pipeline without licensed face data.

Each identity is a fixed arrangement of coloured Gaussian blobs on a face-shaped
ellipse. Every image re-renders that arrangement under a random pose shift,
scale, per-blob displacement, lighting gradient and pixel noise. Identities
differ in how much their images vary (``variability``), which mimics real
corpora where some people are photographed far more consistently than others.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import FaceImage, IdentityRecord


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 40
    n_images: int = 20
    size: int = 32
    seed: int = 0
    blobs: int = 6
    variability: tuple[float, float] = (0.4, 1.6)
    shift: float = 0.05
    blob_jitter: float = 0.04
    light: float = 0.15
    noise: float = 0.04
    looks: int = 3
    min_looks: int = 1
    accessories: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variability"] = list(self.variability)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "variability" in d:
            d["variability"] = tuple(d["variability"])
        return cls(**d)


def _identity_params(rng: np.random.Generator, spec: SyntheticSpec) -> dict:
    return {
        "background": rng.uniform(0.1, 0.9, size=3),
        "skin": rng.uniform(0.3, 0.95, size=3),
        "face_axes": rng.uniform([0.26, 0.32], [0.36, 0.44]),
        "centers": rng.uniform(-0.28, 0.28, size=(spec.blobs, 2)),
        "widths": rng.uniform(0.04, 0.12, size=spec.blobs),
        "colors": rng.uniform(-0.6, 0.6, size=(spec.blobs, 3)),
        "variability": rng.uniform(*spec.variability),
        "looks": [_look_params(rng, spec) for _ in range(rng.integers(spec.min_looks, spec.looks + 1))],
    }


def _look_params(rng: np.random.Generator, spec: SyntheticSpec) -> dict:
    """A recurring appearance mode (setting, hair, accessories) of one identity."""
    return {
        "background": rng.uniform(0.1, 0.9, size=3),
        "hair": rng.uniform(0.0, 0.8, size=3),
        "hair_line": rng.uniform(-0.3, 0.0),
        "acc_centers": rng.uniform(-0.4, 0.4, size=(spec.accessories, 2)),
        "acc_widths": rng.uniform(0.05, 0.12, size=spec.accessories),
        "acc_colors": rng.uniform(-0.7, 0.7, size=(spec.accessories, 3)),
    }


def _render(p: dict, rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    n = spec.size
    v = p["variability"]
    ax = np.linspace(-0.5, 0.5, n)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    shift = rng.normal(0.0, spec.shift * v, size=2)
    scale = np.exp(rng.normal(0.0, 0.05 * v))
    x = (xx - shift[0]) / scale
    y = (yy - shift[1]) / scale

    a, b = p["face_axes"]
    face = 1.0 / (1.0 + np.exp(((x / a) ** 2 + (y / b) ** 2 - 1.0) * 12.0))
    look = p["looks"][rng.integers(len(p["looks"]))]
    img = look["background"][:, None, None] * (1 - face) + p["skin"][:, None, None] * face
    hair = face * (1.0 / (1.0 + np.exp((y - look["hair_line"]) * 30.0)))
    img = img * (1 - hair[None]) + look["hair"][:, None, None] * hair[None]
    centers = p["centers"] + rng.normal(0.0, spec.blob_jitter * v, size=p["centers"].shape)
    for (cx, cy), w, col in zip(centers, p["widths"], p["colors"]):
        g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w**2))
        img = img + col[:, None, None] * (g * face)[None]
    for (cx, cy), w, col in zip(look["acc_centers"], look["acc_widths"], look["acc_colors"]):
        img = img + col[:, None, None] * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * w**2))[None]

    direction = rng.normal(size=2)
    direction /= np.linalg.norm(direction) + 1e-12
    gradient = direction[0] * xx + direction[1] * yy
    img = img * (1.0 + spec.light * v * rng.normal()) + spec.light * v * gradient[None]
    img = img + rng.normal(0.0, spec.noise * v, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_corpus(spec: SyntheticSpec) -> list[IdentityRecord]:
    rng = np.random.default_rng(spec.seed)
    records = []
    for u in range(spec.n_users):
        uid = f"id{u:04d}"
        params = _identity_params(rng, spec)
        images = [FaceImage(_render(params, rng, spec), uid, f"{i:04d}.png") for i in range(spec.n_images)]
        records.append(IdentityRecord(uid, images))
    return records


def write_corpus(records: list[IdentityRecord], root: str | Path) -> Path:
    """Write records as ``root/<user_id>/<image_id>`` PNG files."""
    root = Path(root)
    for rec in records:
        d = root / rec.user_id
        d.mkdir(parents=True, exist_ok=True)
        for im in rec.images:
            arr = np.round(im.pixels.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(d / im.image_id)
    return root
