"""Seeded random streams.

Every random draw in the package goes through :class:`Rng`. The raw bit
generator is numpy's ``PCG64`` (PCG-XSL-RR 128/64), whose output stream is
fixed by numpy's stream-compatibility policy for the bit generator itself.
Everything layered on top is computed here from ``random_raw`` words, so no
numpy distribution algorithm (ziggurat, Lemire) can change the samples:

* uniform doubles: ``(word >> 11) * 2**-53``, in ``[0, 1)``;
* standard normals: Box-Muller on consecutive uniform pairs ``(u1, u2)``,
  ``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``;
* exponentials: ``-ln(1 - u) / rate``;
* permutations: stable argsort of one uniform key per element.

Child streams are derived with ``numpy.random.SeedSequence`` from an entropy
tuple such as ``(root_seed, sample_id, t)``.
"""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "PCG64/numpy-bitgen+box-muller-v1"

_U53 = 1.0 / 9007199254740992.0  # 2**-53
_MASK64 = (1 << 64) - 1


def _seed_words(entropy) -> list[int]:
    if isinstance(entropy, (int, np.integer)):
        entropy = (int(entropy),)
    words = []
    for e in entropy:
        e = int(e)
        if e < 0:
            raise ValueError(f"seed components must be non-negative, got {e}")
        words.append(e & _MASK64)
    return words


class Rng:
    """Deterministic random stream seeded by a 64-bit integer (or a tuple of them)."""

    def __init__(self, seed=0):
        self.seed = seed
        ss = np.random.SeedSequence(_seed_words(seed))
        self._bitgen = np.random.PCG64(ss)

    def child(self, *key: int) -> "Rng":
        """Independent stream derived from this stream's seed and ``key``."""
        base = _seed_words(self.seed)
        return Rng(tuple(base) + tuple(int(k) for k in key))

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size, dtype=np.int64))
        raw = self._bitgen.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * _U53
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller (see module docstring)."""
        n = int(np.prod(size, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n].reshape(size)

    def exponential(self, rate: float, size=None):
        if rate <= 0:
            raise ValueError("exponential rate must be positive")
        u = self.uniform(size)
        return -np.log1p(-u) / rate

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(size)
        span = high - low
        out = np.minimum(np.floor(u * span).astype(np.int64), span - 1) + low
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n} without replacement")
        return self.permutation(n)[:k]


def derive_seed(*key: int) -> int:
    """Collapse a key tuple into one 63-bit seed (stable across platforms).

    63 bits so the seed fits the signed header fields of checkpoint files.
    """
    ss = np.random.SeedSequence(_seed_words(key))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1
