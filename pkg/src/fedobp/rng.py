"""Seed-stream derivation.

Every random draw in a run comes from a generator keyed by
``(seed, purpose, *ids)`` so results never depend on call order or on
how client work is scheduled across threads.
"""

from __future__ import annotations

import zlib

import numpy as np

RngSeed = int


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive(seed: RngSeed, purpose: str, *ids: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *ids)``."""
    if seed < 0 or any(i < 0 for i in ids):
        raise ValueError("seed and stream ids must be non-negative")
    entropy = [int(seed), _tag(purpose), *(int(i) for i in ids)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(rng: RngSeed | np.random.Generator, purpose: str = "default") -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return derive(int(rng), purpose)
