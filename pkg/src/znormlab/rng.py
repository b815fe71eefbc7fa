"""Deterministic 64-bit PRNG used for every stochastic choice in the lab.

splitmix64 expands a user seed into generator state; xoshiro256** produces
the stream. Both follow the public-domain reference algorithms bit for bit,
so shuffles, synthetic datasets and weight init reproduce across machines
and library versions. ``GENERATOR_ID`` is recorded in run manifests.
"""

from __future__ import annotations

import math

GENERATOR_ID = "splitmix64/xoshiro256**"

_MASK64 = (1 << 64) - 1


def splitmix64_stream(seed: int, count: int) -> list[int]:
    """First `count` outputs of splitmix64 starting from `seed`."""
    out = []
    x = seed & _MASK64
    for _ in range(count):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** seeded via splitmix64 from a single 64-bit seed."""

    def __init__(self, seed: int):
        self._s = splitmix64_stream(seed, 4)
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        # top 53 bits -> uniform double in [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint_below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal(self) -> float:
        """Standard normal via Box-Muller; consumes uniforms in pairs."""
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return z
        # u1 in (0, 1] so log() is finite
        u1 = 1.0 - self.random()
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates, descending index order."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint_below(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx


def derive_seed(seed: int, *streams: int | str) -> int:
    """Stable sub-seed for a named stream (e.g. per-epoch shuffles).

    Each stream label is folded into a splitmix64 pass so ("init",) and
    (epoch,) streams drawn from one run seed never collide.
    """
    x = seed & _MASK64
    for s in streams:
        if isinstance(s, str):
            h = 0
            for ch in s.encode("utf-8"):
                h = ((h * 131) + ch) & _MASK64
            s = h
        x = splitmix64_stream(x ^ (s & _MASK64), 1)[0]
    return x


def generator(seed: int, *streams: int | str) -> Xoshiro256StarStar:
    return Xoshiro256StarStar(derive_seed(seed, *streams))
