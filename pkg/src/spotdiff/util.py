"""Small shared helpers: seeded rng derivation and float formatting."""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Independent generator for (seed, tags); stable across runs and platforms.

    String tags hash through crc32 so unrelated streams (data generation,
    splits, training, sampling) never share draws.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode()))
        else:
            entropy.append(int(tag) & 0xFFFFFFFF)
    return np.random.default_rng(entropy)


def fmt_float(x: float) -> str:
    """Nine-significant-digit rendering used by every CSV we emit."""
    return "%.9g" % float(x)
