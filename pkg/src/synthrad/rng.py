"""Seedable random streams.

Every stochastic draw in the package goes through :class:`Rng`.  The bit
source is PCG64 (O'Neill, 2014) seeded through numpy's ``SeedSequence``; only
the raw 64-bit output of the generator is consumed, so the derived streams do
not depend on numpy's higher-level distribution code, which is allowed to
change between releases.

Uniform doubles take the top 53 bits of each raw word: ``(u >> 11) * 2**-53``.
Standard normals use the Box-Muller transform on pairs of uniforms::

    r = sqrt(-2 ln(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)

Samples are produced in float64 and cast to float32 at the end.
"""

from __future__ import annotations

import numpy as np

_INV_2_53 = 1.0 / 9007199254740992.0


class Rng:
    """A PCG64 stream identified by a tuple of non-negative integers."""

    def __init__(self, seed: int, *stream: int):
        self.key = (int(seed), *(int(s) for s in stream))
        if any(k < 0 for k in self.key):
            raise ValueError(f"seed and stream ids must be non-negative, got {self.key}")
        self._bits = np.random.PCG64(np.random.SeedSequence(list(self.key)))

    def child(self, *stream: int) -> "Rng":
        """Independent stream keyed by this stream's key plus ``stream``."""
        return Rng(*self.key, *stream)

    def uniform(self, size) -> np.ndarray:
        """Float64 uniforms in [0, 1)."""
        n = int(np.prod(size, dtype=np.int64))
        raw = self._bits.random_raw(n) if n else np.zeros(0, dtype=np.uint64)
        return ((raw >> np.uint64(11)).astype(np.float64) * _INV_2_53).reshape(size)

    def normal(self, size, dtype=np.float32) -> np.ndarray:
        n = int(np.prod(size, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform((2, pairs))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(size).astype(dtype)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        """Integers in [low, high).  Uses floor(u * span); bias < span / 2**53."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(size)
        return low + np.floor(u * (high - low)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
