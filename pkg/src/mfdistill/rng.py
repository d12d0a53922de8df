"""Portable counter-free PRNG: splitmix64 seeding + xoshiro256++ streams.

The generator algorithm is fixed so that golden files are reproducible on
any platform: a seed is expanded with splitmix64 into the 256-bit state of
a xoshiro256++ generator. Derived streams (per frame, per object) hash
their identifiers through splitmix64 before seeding.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def hash64(*parts: int) -> int:
    """Mix integer identifiers into one 64-bit value via splitmix64."""
    state = 0x8C84A3D1F0E2B657
    for p in parts:
        state, out = splitmix64(state ^ (p & MASK64))
        state = out
    _, out = splitmix64(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256pp:
    """xoshiro256++ with splitmix64 state expansion."""

    def __init__(self, seed: int):
        s = seed & MASK64
        state = []
        for _ in range(4):
            s, out = splitmix64(s)
            state.append(out)
        self.s = state

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) (modulo; bias negligible for n << 2^64)."""
        if n <= 0:
            raise ValueError("randint needs n > 0")
        return self.next_u64() % n


def stream(seed: int, *ids: int) -> Xoshiro256pp:
    """Independent generator for (seed, ids...), e.g. per frame index."""
    return Xoshiro256pp(hash64(seed, *ids))
