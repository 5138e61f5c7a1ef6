"""Portable, counter-based SplitMix64 generator.

The stream is fully specified so it can be reproduced in any language:

* state_i = (seed + i * 0x9E3779B97F4A7C15) mod 2**64 for i = 1, 2, ...
* output_i = mix(state_i) where mix is the SplitMix64 finalizer
  ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
  z *= 0x94D049BB133111EB; z ^= z >> 31`` (all mod 2**64).
* uniform: (output >> 11) * 2**-53, in [0, 1).
* normal: Box-Muller on consecutive pairs (u1, u2) with u1 shifted into
  (0, 1]: r = sqrt(-2 ln u1), z_2j = r cos(2 pi u2), z_2j+1 = r sin(2 pi u2).
* child stream j of seed s: seed' = mix(s XOR mix(j + 0x632BE59BD9B4E019)).
"""
from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_U = np.uint64


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U(30))) * _U(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U(27))) * _U(0x94D049BB133111EB)
    return z ^ (z >> _U(31))


def mix64(x: int) -> int:
    """Scalar SplitMix64 finalizer on a Python int."""
    return int(_mix(np.array([x & _MASK], dtype=np.uint64))[0])


def child_seed(seed: int, index: int) -> int:
    return mix64((seed & _MASK) ^ mix64(index + 0x632BE59BD9B4E019))


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        state = _U(self.seed) + i * _U(GOLDEN)
        return _mix(state)

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> _U(11)).astype(np.float64) * 2.0**-53

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """Integers uniform on the closed range [lo, hi]."""
        span = hi - lo + 1
        return lo + np.floor(self.uniform(n) * span).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        raw = self.next_u64(2 * m) >> _U(11)
        u1 = (raw[0::2].astype(np.float64) + 1.0) * 2.0**-53
        u2 = raw[1::2].astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n) driven by this stream."""
        perm = np.arange(n)
        u = self.uniform(max(n - 1, 0))
        for j, i in enumerate(range(n - 1, 0, -1)):
            k = int(u[j] * (i + 1))
            perm[i], perm[k] = perm[k], perm[i]
        return perm

    def child(self, index: int) -> "SplitMix64":
        return SplitMix64(child_seed(self.seed, index))
