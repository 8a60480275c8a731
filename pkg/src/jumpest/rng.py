"""Splittable counter-based seeding for reproducible parallel Monte Carlo.

Every replication r of a batch derives its own 64-bit seed as
``splitmix64(base_seed, r)`` and owns a private ``numpy`` PCG64 stream.
Results are therefore independent of worker count, execution order, and
batch composition.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(base_seed: int, index: int) -> int:
    """Mix a base seed and a stream index into a 64-bit seed.

    One SplitMix64 output step evaluated at state ``base + (index+1)*gamma``.
    Distinct indices give (for all practical purposes) independent seeds.
    """
    z = (int(base_seed) + (int(index) + 1) * _GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def substream(base_seed: int, *indices: int) -> int:
    """Derive a seed from a base seed and a path of indices (nested splitmix)."""
    s = int(base_seed)
    for ix in indices:
        s = splitmix64(s, ix)
    return s


def rng_for(base_seed: int, *indices: int) -> np.random.Generator:
    """A fresh PCG64 generator for the given (base_seed, indices) stream."""
    return np.random.default_rng(substream(base_seed, *indices))
