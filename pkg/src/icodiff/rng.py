"""Deterministic counter-based random streams.

Every stochastic draw in the package comes from a Philox generator whose key
is derived by hashing a master seed with integer tags (subject index, sample
index, timestep, ...). Streams are therefore independent of execution order
and per-subject / per-sample work can run in parallel without changing any
output.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return z ^ (z >> 31)


def fold(seed: int, *tags: int) -> int:
    """Hash a seed plus integer tags into a 64-bit stream key."""
    h = _splitmix64(int(seed) & _MASK64)
    for tag in tags:
        h = _splitmix64(h ^ (int(tag) & _MASK64))
    return h


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Philox generator keyed by ``fold(seed, *tags)``."""
    return np.random.Generator(np.random.Philox(key=fold(seed, *tags)))
