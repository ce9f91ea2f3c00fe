"""Deterministic, portable pseudo-random number generation.

The generator is xoshiro256** (Blackman & Vigna), seeded through SplitMix64.
Both algorithms are fixed here, constant for constant, so that any
implementation following the same recipe reproduces the exact stream:

  SplitMix64 step (used for seeding and for deriving child seeds):
      z = (x + 0x9E3779B97F4A7C15) mod 2^64
      z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
      z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) mod 2^64
      output = z ^ (z >> 31)

  xoshiro256** next (state s0..s3, 64-bit):
      result = rotl(s1 * 5, 7) * 9
      t = s1 << 17
      s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t
      s3 = rotl(s3, 45)

Derived values are also pinned:
  uniform()        = next() >> 11, scaled by 2^-53  (float64 in [0, 1))
  normal()         = Box-Muller on a pair of uniforms; the second value of
                     the pair is cached and returned by the next call
  int_below(n)     = floor(uniform() * n)
  shuffle          = Fisher-Yates from the last index down, using int_below
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** stream with a documented seeding and derivation scheme."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        s = self.seed
        state = []
        for _ in range(4):
            s, out = _splitmix64(s)
            state.append(out)
        self._s = state
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """float64 in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def normal(self) -> float:
        """Standard normal via Box-Muller; pairs are generated together."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so the log is finite
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare_normal = r * math.sin(theta)
        return r * math.cos(theta)

    def int_below(self, n: int) -> int:
        """Integer in [0, n)."""
        if n <= 0:
            raise ValueError(f"int_below needs n >= 1, got {n}")
        return int(self.uniform() * n)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle, iterating from the end."""
        for i in range(len(items) - 1, 0, -1):
            j = self.int_below(i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream; same (seed, tag) gives the same child."""
        _, mixed = _splitmix64(self.seed)
        _, child_seed = _splitmix64(mixed ^ (tag & _MASK64))
        return Rng(child_seed)

    # Array helpers. Filled in C order so the flat draw sequence is the
    # documented scalar stream.

    def uniform_array(self, shape: tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        flat = np.empty(n, dtype=np.float64)
        span = high - low
        for i in range(n):
            flat[i] = low + span * self.uniform()
        return flat.reshape(shape)

    def normal_array(self, shape: tuple[int, ...], std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        flat = np.empty(n, dtype=np.float64)
        for i in range(n):
            flat[i] = std * self.normal()
        return flat.reshape(shape)

    def unit_vector(self, dim: int) -> np.ndarray:
        v = self.normal_array((dim,))
        norm = float(np.linalg.norm(v))
        if norm == 0.0:  # essentially impossible, but keep it total
            v[0] = 1.0
            norm = 1.0
        return v / norm
