"""Seeded random streams. Every component draws from its own named substream."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str) -> np.random.Generator:
    """Deterministic generator for ``(seed, names...)``; same inputs, same draws."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(n.encode()) for n in names]
    return np.random.default_rng(key)
