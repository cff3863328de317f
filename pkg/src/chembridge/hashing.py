"""Fixed, platform-independent hashing and pseudo-random number generation.

Everything that must be bit-reproducible across runs (fingerprint bits,
scaffold keys, parameter initialisation, shuffles) goes through here.
"""

from __future__ import annotations

import struct
from typing import Iterable, MutableSequence

FNV32_OFFSET = 0x811C9DC5
FNV32_PRIME = 0x01000193
FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a32(data: bytes) -> int:
    h = FNV32_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV32_PRIME) & MASK32
    return h


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & MASK64
    return h


def pack_ints32(values: Iterable[int]) -> bytes:
    """Little-endian encoding of signed 32-bit integers."""
    values = list(values)
    return struct.pack("<%di" % len(values), *values)


def pack_uints32(values: Iterable[int]) -> bytes:
    values = list(values)
    return struct.pack("<%dI" % len(values), *values)


def pack_uints64(values: Iterable[int]) -> bytes:
    values = list(values)
    return struct.pack("<%dQ" % len(values), *values)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** seeded through splitmix64.

    Pure Python so the stream is identical on every platform and numpy
    version.
    """

    def __init__(self, seed: int):
        sm = seed & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state: Iterable[int]) -> "Xoshiro256":
        rng = cls.__new__(cls)
        rng._s = [int(v) & MASK64 for v in state]
        return rng

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniforms(self, n: int, low: float, high: float) -> list[float]:
        """``n`` uniform draws in [low, high); inlined loop, this is the hot path of init."""
        s0, s1, s2, s3 = self._s
        span = high - low
        scale = 1.0 / 9007199254740992.0
        out = [0.0] * n
        for i in range(n):
            x = (s1 * 5) & MASK64
            x = (((x << 7) | (x >> 57)) & MASK64) * 9 & MASK64
            out[i] = low + span * ((x >> 11) * scale)
            t = (s1 << 17) & MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return out

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (MASK64 + 1) - ((MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: MutableSequence) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
