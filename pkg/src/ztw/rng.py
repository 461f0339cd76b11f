"""SplitMix64-based random streams.

Every stochastic choice in this package (parameter init, batch shuffling,
synthetic data, environment seeding) draws from SplitMix64 rather than a
platform RNG, so fixtures are reproducible bit-for-bit from an integer
seed, on any machine.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """Deterministic 64-bit stream generator.

    Reference sequence: state advances by the golden-gamma constant, the
    output is the standard two-round xor-multiply mix. `uniform` maps the
    top 53 bits into [0, 1).
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def fork(self) -> "SplitMix64":
        """Independent substream seeded from this stream."""
        return SplitMix64(self.next_u64())

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self) -> float:
        """Standard normal via Box-Muller (fresh pair per call)."""
        u1 = self.uniform()
        while u1 == 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (unbiased)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        x = self.next_u64()
        while x >= limit:
            x = self.next_u64()
        return x % n

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = [low + (high - low) * self.uniform() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape)

    def normal_array(self, shape, sigma: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = [sigma * self.normal() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx
