"""Face dataset loading, preprocessing, user-level splits and episode sampling."""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, InfeasibleSampleError, SplitError
from .seeding import as_rng

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp"}

# roles used in split manifests
MEM_TRAIN = "mem_train"
MEM_NONTRAIN = "mem_nontrain"
NONMEM = "nonmem"


@dataclass(frozen=True, eq=False)
class FaceImage:
    pixels: np.ndarray  # float32, (3, H, W), values in [0, 1]
    user_id: str
    image_id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixels, got {self.pixels.shape}")

    @property
    def size(self) -> int:
        return self.pixels.shape[-1]

    @property
    def key(self) -> tuple[str, str]:
        return (self.user_id, self.image_id)


@dataclass
class IdentityRecord:
    user_id: str
    images: list[FaceImage]

    def __len__(self) -> int:
        return len(self.images)


def as_pool(records: Sequence[IdentityRecord]) -> dict[str, list[FaceImage]]:
    return {r.user_id: list(r.images) for r in records}


def stack_pixels(images: Sequence[FaceImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels for im in images]).astype(np.float32))


# ---------------------------------------------------------------------------
# loading / preprocessing
# ---------------------------------------------------------------------------

def _decode(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_dataset(root_path: str | Path) -> list[IdentityRecord]:
    """Read a folder-per-identity corpus ``root/<user_id>/<image>``.

    Users are ordered lexicographically, images by filename. Files that fail to
    decode are skipped; each one emits a ``UserWarning``.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root does not exist: {root}")
    records = []
    skipped = 0
    for user_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = []
        for f in sorted(p for p in user_dir.iterdir() if p.is_file()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                pixels = _decode(f)
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                skipped += 1
                warnings.warn(f"skipping undecodable image {f}: {exc}", stacklevel=2)
                continue
            images.append(FaceImage(pixels, user_dir.name, f.name))
        records.append(IdentityRecord(user_dir.name, images))
    if skipped:
        logger.warning("load_dataset: skipped %d undecodable file(s) under %s", skipped, root)
    return records


def resize_pixels(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a (3, H, W) array to (3, size, size)."""
    if pixels.shape[1] == size and pixels.shape[2] == size:
        return pixels
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].clamp_(0.0, 1.0).numpy()


def preprocess(
    records: Sequence[IdentityRecord],
    min_images: int = 100,
    keep: int = 100,
    size: int = 96,
    seed: int | np.random.Generator = 0,
) -> list[IdentityRecord]:
    """Drop users with fewer than ``min_images``; subsample the rest to ``keep``; resize."""
    if keep > min_images:
        raise ConfigurationError(f"keep ({keep}) must not exceed min_images ({min_images})")
    if keep <= 0 or size <= 0:
        raise ConfigurationError("keep and size must be positive")
    rng = as_rng(seed)
    out = []
    for rec in records:
        if len(rec.images) < min_images:
            continue
        idx = np.sort(rng.choice(len(rec.images), size=keep, replace=False))
        images = [
            FaceImage(resize_pixels(rec.images[i].pixels, size), rec.user_id, rec.images[i].image_id)
            for i in idx
        ]
        out.append(IdentityRecord(rec.user_id, images))
    return out


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class HalfSplit:
    """One half (target or auxiliary) of the user-level split."""

    name: str
    mem_users: list[str]
    nonmem_users: list[str]
    train_ids: dict[str, list[str]] = field(default_factory=dict)
    nontrain_ids: dict[str, list[str]] = field(default_factory=dict)
    nonmem_ids: dict[str, list[str]] = field(default_factory=dict)

    @property
    def users(self) -> list[str]:
        return self.mem_users + self.nonmem_users

    def role_of(self, user_id: str) -> str:
        if user_id in self.train_ids:
            return "member"
        if user_id in self.nonmem_ids:
            return "nonmember"
        raise KeyError(user_id)

    def _select(self, index: Mapping[tuple[str, str], FaceImage], ids: Mapping[str, list[str]]):
        return {u: [index[(u, i)] for i in ids[u]] for u in ids}

    def train_pool(self, index) -> dict[str, list[FaceImage]]:
        """Images the model of this half is trained on (members' train images)."""
        return self._select(index, self.train_ids)

    def nontrain_pool(self, index) -> dict[str, list[FaceImage]]:
        return self._select(index, self.nontrain_ids)

    def nonmem_pool(self, index) -> dict[str, list[FaceImage]]:
        return self._select(index, self.nonmem_ids)

    def auditor_pool(self, index) -> dict[str, list[FaceImage]]:
        """Images available to the auditor: member non-train images plus all non-member images."""
        pool = self.nontrain_pool(index)
        pool.update(self.nonmem_pool(index))
        return pool


@dataclass
class DatasetSplit:
    target: HalfSplit
    aux: HalfSplit

    def half(self, name: str) -> HalfSplit:
        if name == "target":
            return self.target
        if name == "aux":
            return self.aux
        raise KeyError(name)

    def manifest_lines(self) -> list[str]:
        lines = []
        for h in (self.target, self.aux):
            for role, ids in ((MEM_TRAIN, h.train_ids), (MEM_NONTRAIN, h.nontrain_ids), (NONMEM, h.nonmem_ids)):
                for u in ids:
                    for i in ids[u]:
                        lines.append(f"{h.name}\t{role}\t{u}\t{i}")
        return lines

    def to_manifest(self) -> str:
        return "\n".join(self.manifest_lines()) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_manifest(), encoding="utf-8")

    @classmethod
    def from_manifest(cls, text: str) -> "DatasetSplit":
        halves = {n: HalfSplit(n, [], []) for n in ("target", "aux")}
        for line in text.splitlines():
            if not line.strip():
                continue
            hname, role, u, i = line.split("\t")
            h = halves[hname]
            store = {MEM_TRAIN: h.train_ids, MEM_NONTRAIN: h.nontrain_ids, NONMEM: h.nonmem_ids}[role]
            if u not in store:
                store[u] = []
                if role == NONMEM:
                    h.nonmem_users.append(u)
                elif role == MEM_TRAIN:
                    h.mem_users.append(u)
            store[u].append(i)
        return cls(halves["target"], halves["aux"])

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSplit":
        return cls.from_manifest(Path(path).read_text(encoding="utf-8"))


def image_index(records: Sequence[IdentityRecord]) -> dict[tuple[str, str], FaceImage]:
    return {im.key: im for r in records for im in r.images}


def _floor_frac(n: int, frac: float) -> int:
    # tolerate float representation error (e.g. 0.8 * 5 = 4.000000000000001)
    return int(math.floor(n * frac + 1e-9))


def split(
    records: Sequence[IdentityRecord],
    seed: int | np.random.Generator,
    half_frac: float = 0.5,
    mem_frac: float = 0.8,
    train_frac: float = 0.5,
) -> DatasetSplit:
    """Nested user-level split: target/aux halves, members/non-members, train/non-train images.

    The first-listed portion of every split gets the floor of its share.
    """
    rng = as_rng(seed)
    if len(records) < 10:
        raise SplitError(f"need at least 10 users to split, got {len(records)}")
    users = [r.user_id for r in records]
    if len(set(users)) != len(users):
        raise SplitError("duplicate user ids in records")
    by_user = {r.user_id: r for r in records}
    order = [users[i] for i in rng.permutation(len(users))]
    n_target = _floor_frac(len(order), half_frac)
    halves = {}
    for name, members in (("target", order[:n_target]), ("aux", order[n_target:])):
        n_mem = _floor_frac(len(members), mem_frac)
        mem, nonmem = members[:n_mem], members[n_mem:]
        if not mem:
            raise SplitError(f"{name} half: member cell is empty ({len(members)} users)")
        if not nonmem:
            raise SplitError(f"{name} half: non-member cell is empty ({len(members)} users)")
        h = HalfSplit(name, list(mem), list(nonmem))
        for u in mem:
            ids = [im.image_id for im in by_user[u].images]
            perm = rng.permutation(len(ids))
            n_train = _floor_frac(len(ids), train_frac)
            if n_train == 0 or n_train == len(ids):
                raise SplitError(f"{name} half: user {u} has {len(ids)} images, cannot split train/non-train")
            h.train_ids[u] = [ids[j] for j in sorted(perm[:n_train])]
            h.nontrain_ids[u] = [ids[j] for j in sorted(perm[n_train:])]
        for u in nonmem:
            h.nonmem_ids[u] = [im.image_id for im in by_user[u].images]
        halves[name] = h
    return DatasetSplit(halves["target"], halves["aux"])


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    user_ids: list[str]
    support: list[list[FaceImage]]  # way -> shots
    queries: list[list[FaceImage]]  # way -> queries

    @property
    def k(self) -> int:
        return len(self.user_ids)

    @property
    def shots(self) -> int:
        return len(self.support[0])

    @property
    def n_queries(self) -> int:
        return len(self.queries[0])


def check_feasible(pool: Mapping[str, Sequence[FaceImage]], k: int, per_user: int, what: str = "episode") -> list[str]:
    """Return the eligible users, or raise naming the limiting user."""
    if k <= 0 or per_user <= 0:
        raise ConfigurationError("k and per-user image counts must be positive")
    eligible = sorted(u for u, ims in pool.items() if len(ims) >= per_user)
    if len(eligible) < k:
        short = sorted((u for u in pool if u not in eligible), key=lambda u: (len(pool[u]), u))
        limiting = f"; limiting user {short[0]!r} has {len(pool[short[0]])} images" if short else ""
        raise InfeasibleSampleError(
            f"{what} needs {k} users with >= {per_user} images, only {len(eligible)} qualify"
            f" (pool has {len(pool)} users){limiting}"
        )
    return eligible


def sample_episode(
    pool: Mapping[str, Sequence[FaceImage]],
    k: int,
    shots: int,
    queries: int,
    seed: int | np.random.Generator,
) -> Episode:
    rng = as_rng(seed)
    eligible = check_feasible(pool, k, shots + queries)
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=k, replace=False)]
    support, qs = [], []
    for u in chosen:
        ims = pool[u]
        idx = rng.choice(len(ims), size=shots + queries, replace=False)
        support.append([ims[i] for i in idx[:shots]])
        qs.append([ims[i] for i in idx[shots:]])
    return Episode(chosen, support, qs)
