"""Splittable counter-based random streams.

Streams are addressed by a path of names below a root seed, so a draw depends
only on (seed, path, call sequence on that stream), never on how many other
streams were consumed first.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64"


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


class Rng:
    """A named stream of draws from the Philox counter-based generator."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_name_key(p) for p in self.path))
        self.generator = np.random.Generator(np.random.Philox(ss))

    @property
    def algorithm(self) -> str:
        return ALGORITHM

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    # thin pass-throughs used across the package
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) draws resampled until they fall inside ``±bound·std``."""
        out = self.generator.normal(0.0, std, shape)
        bad = np.abs(out) > bound * std
        while bad.any():
            out[bad] = self.generator.normal(0.0, std, int(bad.sum()))
            bad = np.abs(out) > bound * std
        return out
