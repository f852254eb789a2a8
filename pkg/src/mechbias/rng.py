"""Pinned pseudo-random generator.

All randomness in the package (synthetic weights, fixture corpora, data splits,
probe initialisation) goes through :class:`SplitMix64` so results do not depend
on the numpy version or platform.

Algorithm (Steele, Lea & Flood 2014), 64-bit unsigned arithmetic mod 2**64::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Derived quantities:

* uniform in [0, 1): ``(z >> 11) * 2**-53``
* standard normal: Box-Muller on consecutive uniform pairs ``(u1, u2)``,
  ``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``
* permutation: Fisher-Yates from the top, ``j = floor(u * (i + 1))``
* child seeds: ``derive_seed(seed, label)`` = first output of a SplitMix64
  seeded with ``seed XOR fnv1a64(label)``

Test vectors (seed 0): 0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

_G = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, *labels: str | int) -> int:
    """Deterministic child seed for a named sub-stream."""
    out = seed & MASK64
    for label in labels:
        out = SplitMix64(out ^ fnv1a64(str(label))).next_u64()
    return out


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * _G
            out = _mix(states)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape: int | tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape))
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return (z[:size] * scale).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[step] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
