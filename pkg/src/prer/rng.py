"""Deterministic random streams.

Every source of randomness in a run flows from a single seeded Rng.
Child streams are derived by hashing the parent seed together with a
string label, so adding a new consumer never shifts the draws seen by
existing ones. This is what makes per-task resumption and strategy
comparisons on the same seed bitwise reproducible.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Seeded wrapper around numpy's PCG64 with labelled forking."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed & _MASK64))

    def fork(self, label: str) -> "Rng":
        digest = hashlib.blake2b(
            f"{self.seed}/{label}".encode(), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "big"))

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed})"
