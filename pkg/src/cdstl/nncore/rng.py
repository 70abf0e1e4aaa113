"""SplitMix64 random stream.

The generator is the standard SplitMix64 (Steele, Lea & Flood):

    state  += 0x9E3779B97F4A7C15
    z       = state
    z       = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z       = (z ^ (z >> 27)) * 0x94D049BB133111EB
    output  = z ^ (z >> 31)

all arithmetic mod 2**64. Because the state advances by a constant, the
k-th output only depends on ``seed + k * GAMMA`` and a whole block can be
produced at once with vectorised uint64 arithmetic. Doubles take the top
53 bits. Nothing here depends on platform word size or library RNGs, so a
seed produces the same stream everywhere.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

# FNV-1a 64 constants for keyed seed derivation
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def splitmix64(x: int) -> int:
    """Single SplitMix64 finaliser applied to ``x + GAMMA``."""
    with np.errstate(over="ignore"):
        z = np.array([(x + GAMMA) & MASK64], dtype=np.uint64)
        return int(_mix(z)[0])


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, *keys) -> int:
    """Derive a child seed from ``seed`` and a path of string/int keys."""
    s = int(seed) & MASK64
    for key in keys:
        s = splitmix64(s ^ fnv1a64(str(key)))
    return s


class Rng:
    """Counter-based SplitMix64 stream with numpy convenience draws."""

    algorithm = "splitmix64"

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._counter = 0

    def spawn(self, *keys) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    def bits(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        k = np.arange(self._counter + 1, self._counter + 1 + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + k * np.uint64(GAMMA)
            return _mix(state)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])[:n]
        return (mean + std * z).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.bits(n)
        return np.argsort(keys, kind="stable").astype(np.int64)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError("empty integer range")
        shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
        n = max(1, int(np.prod(shape, dtype=np.int64)))
        out = low + np.floor(self.uniform(n) * span).astype(np.int64)
        return int(out[0]) if size is None else out.reshape(shape)
