"""Portable SplitMix64 generator.

Every random draw made by the instance generators and the classical
baselines goes through this module, so a dataset is reproducible from
``(family, n, m, seed)`` in any language that implements 64-bit
unsigned arithmetic.

Algorithm (all arithmetic modulo 2**64)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Derived draws:

* ``random()``      -> ``(next_u64() >> 11) * 2**-53``, in ``[0, 1)``
* ``randbelow(k)``  -> rejection sampling on ``next_u64()`` against the
  largest multiple of ``k`` below ``2**64``, then ``% k``
* ``normal()``      -> Box-Muller, ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``;
  one normal per two uniforms, nothing cached
* ``derive_seed(seed, *path)`` -> child stream seeds; each path element
  ``p`` maps ``s -> mix(s ^ mix(p + GOLDEN))`` where ``mix`` is the output
  function above applied to a single value.
"""

from __future__ import annotations

import math
from typing import Sequence, TypeVar

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

T = TypeVar("T")


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *path: int) -> int:
    """Seed of the substream reached by following ``path`` from ``seed``."""
    s = seed & MASK64
    for p in path:
        s = mix64(s ^ mix64((p + GOLDEN) & MASK64))
    return s


class SplitMix64:
    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, k: int) -> int:
        if k <= 0:
            raise ValueError(f"randbelow needs k >= 1, got {k}")
        limit = (1 << 64) - ((1 << 64) % k)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % k

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range ``[lo, hi]``."""
        return lo + self.randbelow(hi - lo + 1)

    def choice(self, seq: Sequence[T]) -> T:
        return seq[self.randbelow(len(seq))]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, walking from the last index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def normal(self) -> float:
        u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
