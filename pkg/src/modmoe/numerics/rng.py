"""Seeded random streams.

The base generator is xoshiro256** seeded through splitmix64, so a given seed
yields the same stream on every platform. Named substreams (``corpus``,
``init``, ``batching``, ``sgd``...) are derived by hashing the root seed with
the name, which lets each pipeline stage be reproduced on its own.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int) -> tuple[int, int]:
    """Return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Rng:
    """xoshiro256** generator."""

    __slots__ = ("seed", "_s")

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK, 7) * 9) & _MASK
        t = (s[1] << 17) & _MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n): modulo of a 64-bit draw, rejecting the biased tail."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx

    def substream(self, name: str) -> "Rng":
        return Rng(derive_seed(self.seed, name))

    def numpy(self) -> np.random.Generator:
        """A numpy Generator seeded from the next 128 bits of this stream.

        Used for bulk array sampling (weight init), where a per-element
        pure-Python loop would dominate runtime.
        """
        hi, lo = self.next_u64(), self.next_u64()
        return np.random.Generator(np.random.PCG64((hi << 64) | lo))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.numpy().standard_normal(shape) * std).astype(dtype)


def derive_seed(seed: int, name: str) -> int:
    h = hashlib.blake2b(f"{int(seed)}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")
