"""Counter-based pseudo-random numbers.

Every draw is ``splitmix64(seed + (counter + 1) * GOLDEN)`` where ``counter``
advances by one per 64-bit word consumed.  The mixer constants are the ones
published with SplitMix64 (Steele, Lea & Flood 2014), so integer and uniform
streams are identical on every platform; normals additionally depend on the
platform's ``log``/``cos``.

Derived quantities:

* ``uniform``: ``(word >> 11) * 2**-53`` in ``[0, 1)``.
* ``normal``: Box-Muller, cosine branch, consuming two words per value.
* ``integers``: ``floor(uniform * high)``.
* ``permutation``: stable argsort of ``n`` uniforms.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """Mix ``seed`` with each counter value; returns uint64 words."""
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + (c + np.uint64(1)) * _GOLDEN
    return _mix(z)


class Rng:
    """Stateful view of the counter-based stream: ``(seed, counter)``."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def words(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, np.arange(self.counter, self.counter + n, dtype=np.uint64))
        self.counter += n
        return out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.words(2 * n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1 = 1.0 - u[:n]  # (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[n:])
        return (z * std).reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        return np.floor(self.uniform(shape) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key``; does not advance ``self``."""
        child = splitmix64(self.seed ^ 0xD1B54A32D192ED03, np.array([key], dtype=np.uint64))
        return Rng(int(child[0]))
