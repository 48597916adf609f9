"""Seeded random source.

All randomness in the project comes from :class:`Rng`, a thin wrapper over
numpy's Philox-4x64 counter-based generator. Child streams are derived from
``(seed, *keys)`` through ``SeedSequence`` so that any (step, sample, stream)
triple gets an independent, reproducible generator regardless of the order
in which streams are created.
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64"


class Rng:
    def __init__(self, seed: int, keys: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.keys + tuple(keys))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        return self._gen.permutation(n)[:k]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"
