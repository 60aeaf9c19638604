"""Portable deterministic random numbers.

Every stochastic operation in the toolkit draws from this generator so that
identical seeds reproduce identical bytes across machines and across
reimplementations in other languages.  The construction is fully specified:

* seeding: splitmix64 expands a 64-bit seed into the 256-bit state of the
  main generator;
* main generator: xoshiro256** (Blackman & Vigna), 64-bit outputs;
* uniforms: the top 53 bits of an output scaled by 2^-53, giving [0, 1);
* Gaussians: Box-Muller on a uniform pair, cosine branch returned first,
  sine branch cached;
* bounded ints: modulo reduction of a 64-bit output (the bias of at most
  n / 2^64 is irrelevant here and keeps the mapping trivial to port);
* substreams: ``split(label)`` derives a child seed by mixing the parent
  seed with the FNV-1a hash of the UTF-8 label, so independent operations
  can share one top-level seed without coupling their draw sequences.
"""

from __future__ import annotations

import math

import numpy as np

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(x: int) -> int:
    """splitmix64 output function: a strong 64-bit bit mixer."""
    x &= _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _M64
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _M64


class Rng:
    """xoshiro256** stream seeded via splitmix64."""

    __slots__ = ("seed", "_s", "_gauss_cache")

    def __init__(self, seed: int):
        self.seed = int(seed) & _M64
        state = self.seed
        s = []
        for _ in range(4):
            state = (state + _GOLDEN) & _M64
            s.append(mix64(state))
        self._s = s
        self._gauss_cache: float | None = None

    def split(self, label: str) -> "Rng":
        """Child stream keyed by (seed, label); independent of draw position."""
        return Rng(mix64(self.seed ^ fnv1a64(label.encode("utf-8"))))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _M64, 7) * 9) & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * 1.1102230246251565e-16  # 2^-53

    def gauss(self) -> float:
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
            return z
        u1 = 1.0 - self.uniform()  # (0, 1]: keeps log() finite
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._gauss_cache = r * math.sin(theta)
        return r * math.cos(theta)

    def gaussians(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.gauss()
        return out

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        return self.next_u64() % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
