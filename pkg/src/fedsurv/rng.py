"""Deterministic random-stream derivation.

Every stochastic component draws from its own Generator derived from
(global seed, structural coordinates such as client id / round / purpose),
so results are bit-stable under a fixed seed regardless of execution order
and safe to parallelise across clients or seeds.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_entropy(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def derive_rng(*parts: int | str) -> np.random.Generator:
    """Generator keyed by a tuple of ints/strings (order-sensitive)."""
    if not parts:
        raise ValueError("at least one key part is required")
    entropy = [_as_entropy(p) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))
