"""Seeded random streams keyed by (seed, purpose, counters)."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Independent Philox stream for ``seed`` and the given key path.

    Philox is counter-based, so e.g. ``make_rng(seed, "nap", stage)`` gives
    the same noise for a stage no matter what was drawn before it.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
