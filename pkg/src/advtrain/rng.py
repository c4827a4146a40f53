"""splitmix64 stream and the Fisher-Yates shuffle built on it.

Everything random in a run (parameter init, epoch shuffles) is derived from
these so runs reproduce across platforms and languages.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential splitmix64 generator (Steele, Lea & Flood)."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        """Double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into a seed; distinct tag tuples give unrelated streams."""
    h = mix64(seed & MASK64)
    for tag in tags:
        h = mix64((h ^ (tag & MASK64)) + GAMMA & MASK64)
    return h


def uniform_block(seed: int, n: int) -> np.ndarray:
    """The first ``n`` :meth:`SplitMix64.uniform` draws of ``SplitMix64(seed)``, vectorized."""
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & MASK64) + steps * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def fisher_yates(n: int, seed: int) -> list[int]:
    """Permutation of ``range(n)``: for i = n-1..1 swap i with ``next_u64() % (i + 1)``."""
    perm = list(range(n))
    gen = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = gen.next_u64() % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
