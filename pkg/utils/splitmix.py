"""
SplitMix64 pseudo-random stream.

Counter based: draw i of a stream seeded with s is mix(s + (i + 1) * GAMMA),
so a block of draws is computed with vectorised uint64 arithmetic and the
sequence is bitwise identical on every platform.
"""

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Stateful SplitMix64 generator with block draws"""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit outputs"""
        steps = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + steps * GAMMA
            return _mix(state)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) from the top 53 bits of each draw"""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform_range(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.uniform(n)

    def normal(self, n: int) -> np.ndarray:
        """n standard normal doubles (Box-Muller)"""
        pairs = (n + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n) ordered by fresh 64-bit keys"""
        return np.argsort(self.next_u64(n), kind="stable")

    def bernoulli_mask(self, shape, keep_prob: float) -> np.ndarray:
        size = int(np.prod(shape))
        return (self.uniform(size) < keep_prob).reshape(shape)

    def __repr__(self) -> str:
        return f"SplitMix64(seed={self.seed}, counter={self.counter})"
