"""Deterministic seed derivation for parallel-safe RNG streams.

Streams are derived by folding integers through splitmix64, a documented
portable 64-bit mixer, and feeding the result to numpy's PCG64 bit
generator (also a named, stable algorithm). The same (global seed,
sample index, epoch) triple therefore reproduces the same stream on any
platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix64(*values: int) -> int:
    """Fold integers into one 64-bit seed: acc = splitmix64(acc ^ value)."""
    acc = _GOLDEN
    for v in values:
        acc = _splitmix64(acc ^ (int(v) & _MASK64))
    return acc


def rng_from(*values: int) -> np.random.Generator:
    """PCG64 generator seeded from the mix64 fold of `values`."""
    return np.random.Generator(np.random.PCG64(mix64(*values)))
