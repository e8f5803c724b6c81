"""Named, splittable pseudo-random streams.

Every source of randomness in the package hangs off an explicit 64-bit
seed. Child streams are derived by hashing the root seed together with a
path of names, so `Rng(7).child("init").child("layer0")` is reproducible
and independent of draw order elsewhere. There is no global RNG state.
"""
from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """A PCG64 stream addressed by (seed, name path)."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.blake2b(
            ("%d/%s" % (self.seed, "/".join(self.path))).encode(), digest_size=8
        ).digest()
        self._gen = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    # thin pass-throughs -----------------------------------------------------
    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std + mean).astype(dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def trunc_normal(self, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
        """Normal(0, std) resampled until all draws fall within two sigma."""
        out = self._gen.standard_normal(shape)
        for _ in range(64):
            bad = np.abs(out) > 2.0
            if not bad.any():
                break
            out[bad] = self._gen.standard_normal(int(bad.sum()))
        return (out * std).astype(dtype)

    def shuffled(self, items):
        order = self._gen.permutation(len(items))
        return [items[i] for i in order]
