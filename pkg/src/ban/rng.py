"""Deterministic pseudo-randomness for the whole package.

Every random draw (dataset bytes, weight init, proposal jitter, batch
order) flows through one generator family so that a single integer seed
reproduces a run bit for bit, independent of platform or library
version.  The constants below are fixed and part of the on-disk
contract: regenerating a dataset with the same seed must produce
identical bytes.

Generator: xorshift64* with shift triple (12, 25, 27) and output
multiplier 0x2545F4914F6CDD1D.  Seeds are conditioned through one round
of the splitmix64 finalizer (increment 0x9E3779B97F4A7C15, multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB) so that seed 0 is usable and
nearby seeds decorrelate.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_SPLITMIX_INC = 0x9E3779B97F4A7C15
_XORSHIFT_MULT = 0x2545F4914F6CDD1D
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    """One splitmix64 step: returns a well-mixed 64-bit value for x."""
    x = (x + _SPLITMIX_INC) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    """FNV-1a hash of the UTF-8 bytes of `text`."""
    h = _FNV_OFFSET
    for b in text.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(seed: int, *tokens) -> int:
    """Fold string/int tokens into `seed` to get an independent stream.

    Used to give every named consumer (a parameter, an iteration, an
    image) its own generator without any cross-talk between streams.
    """
    h = splitmix64(seed & _MASK64)
    for tok in tokens:
        h = splitmix64(h ^ fnv1a64(str(tok)))
    return h


class XorShift64Star:
    """Sequential xorshift64* stream with float/int helpers."""

    def __init__(self, seed: int):
        s = splitmix64(seed & _MASK64)
        # the all-zero state is the one fixed point of xorshift; avoid it
        self._state = s if s != 0 else _SPLITMIX_INC
        self._gauss_cache: float | None = None

    def u64(self) -> int:
        s = self._state
        s ^= s >> 12
        s ^= (s << 25) & _MASK64
        s ^= s >> 27
        self._state = s
        return (s * _XORSHIFT_MULT) & _MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform float in [lo, hi) with 53 bits of resolution."""
        u = (self.u64() >> 11) * (2.0**-53)
        return lo + (hi - lo) * u

    def randint(self, n: int) -> int:
        """Integer in [0, n) as u64 mod n (bias < 2**-32 for n < 2**32)."""
        if n <= 0:
            raise ValueError("randint needs n > 0")
        return self.u64() % n

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Gaussian draw via Box-Muller; pairs are cached for speed."""
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
        else:
            # 1 - uniform() lies in (0, 1], keeping log() finite
            u1 = 1.0 - self.uniform()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            theta = 2.0 * math.pi * u2
            z = r * math.cos(theta)
            self._gauss_cache = r * math.sin(theta)
        return mu + sigma * z

    def normals(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """Array of n sequential Gaussian draws."""
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.normal(mu, sigma)
        return out

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
