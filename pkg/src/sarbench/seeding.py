"""Deterministic 64-bit seed derivation for parallel data pipelines.

Every stochastic stage derives its own RNG from a master seed plus integer
keys (epoch, item index, role).  The derivation is a pure function, so the
same work item gets the same randomness no matter which thread or process
executes it, or in which order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 finalizer round; maps u64 -> u64 with good avalanche."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, *keys: int) -> int:
    """Mix integer keys into a master seed, yielding a stable u64 sub-seed.

    ``derive_seed(s, a, b)`` differs from ``derive_seed(s, b, a)``: the mix
    is order sensitive by design so (epoch, index) tuples stay distinct.
    """
    x = splitmix64(master & _MASK64)
    for k in keys:
        x = splitmix64(x ^ ((int(k) * _GOLDEN) & _MASK64))
    return x


def rng_for(master: int, *keys: int) -> np.random.Generator:
    """A fresh PCG64 generator seeded from ``derive_seed(master, *keys)``."""
    return np.random.default_rng(derive_seed(master, *keys))
