"""Seeded, splittable random streams.

Every stochastic operation in the package draws from a ``SeededRng``. The
underlying generator is numpy's Philox counter-based bit generator, which
produces the same stream for the same key on every platform. Independent
child streams are derived with :meth:`SeededRng.split`, which mixes the
parent seed with the split keys through splitmix64, so a stream is a pure
function of (root seed, split path).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (Steele et al. constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def _fold_key(seed: int, key: int | str) -> int:
    if isinstance(key, str):
        # FNV-1a over the UTF-8 bytes, folded into the seed.
        h = 0xCBF29CE484222325
        for b in key.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        key = h
    return splitmix64((seed ^ key) & _MASK64)


class SeededRng:
    """Deterministic random stream with a splittable interface.

    ``split(*keys)`` derives an independent child stream; the same
    (seed, keys) always yields the same child on any platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def split(self, *keys: int | str) -> "SeededRng":
        s = splitmix64(self.seed)
        for k in keys:
            s = _fold_key(s, k)
        return SeededRng(s)

    # Thin pass-throughs; all consumers draw via these so the consumption
    # order stays part of each caller's documented contract.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n)."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.gen.choice(n, size=k, replace=False)
