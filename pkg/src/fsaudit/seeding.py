"""Seed derivation.

Every random decision in an experiment traces back to the master seed through
``derive_seed(master, stage, index)``. Stage names are hashed with SHA-256 so
the derivation does not depend on Python's per-process string hashing.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _stage_key(stage: str) -> int:
    return int.from_bytes(hashlib.sha256(stage.encode("utf-8")).digest()[:4], "little")


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(master), _stage_key(stage), int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def as_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("a seed or numpy Generator is required")
    return np.random.default_rng(int(seed))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
