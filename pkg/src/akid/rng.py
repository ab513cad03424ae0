"""PCG32 random number generator (XSH-RR output, 64-bit LCG state).

Bulk draws are vectorized with numpy by jumping the LCG ahead, so a block of
``n`` outputs is identical to ``n`` calls of :meth:`Pcg32.next_u32`.
"""
from __future__ import annotations

import numpy as np

_MULT = 6364136223846793005
_MASK64 = (1 << 64) - 1


def _output(old):
    xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & np.uint64(0xFFFFFFFF)
    rot = old >> np.uint64(59)
    left = (np.uint64(32) - rot) & np.uint64(31)
    return ((xorshifted >> rot) | (xorshifted << left)) & np.uint64(0xFFFFFFFF)


class Pcg32:
    """Seedable PCG32 stream.

    ``seed`` picks the starting state and ``stream`` the increment, following
    the reference ``pcg32_srandom(initstate, initseq)``.
    """

    def __init__(self, seed: int = 0, stream: int = 0):
        self.inc = ((int(stream) << 1) | 1) & _MASK64
        self.state = 0
        self._advance()
        self.state = (self.state + int(seed)) & _MASK64
        self._advance()

    def _advance(self):
        self.state = (self.state * _MULT + self.inc) & _MASK64

    def next_u32(self) -> int:
        old = self.state
        self._advance()
        return int(_output(np.uint64(old)))

    def random_u32(self, n: int) -> np.ndarray:
        """Return the next ``n`` outputs as a uint64 array of 32-bit values."""
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        # mul[k], add[k]: affine map taking the current state k steps ahead
        mul = np.ones(1, dtype=np.uint64)
        add = np.zeros(1, dtype=np.uint64)
        while mul.size < n:
            m = mul.size
            jump_mul = np.uint64((int(mul[-1]) * _MULT) & _MASK64)
            jump_add = np.uint64((int(add[-1]) * _MULT + self.inc) & _MASK64)
            mul = np.concatenate([mul, mul * jump_mul])
            add = np.concatenate([add, mul[:m] * jump_add + add[:m]])
        mul, add = mul[:n], add[:n]
        olds = mul * np.uint64(self.state) + add
        last = int(olds[-1])
        self.state = (last * _MULT + self.inc) & _MASK64
        return _output(olds)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0, dtype=np.float64):
        """Uniform samples on [low, high) at 32-bit resolution."""
        shape = () if size is None else (tuple(size) if np.iterable(size) else (int(size),))
        count = int(np.prod(shape, dtype=np.int64))
        u = self.random_u32(count).astype(np.float64) * (1.0 / 4294967296.0)
        out = (low + (high - low) * u).astype(dtype).reshape(shape)
        return out if size is not None else out.item()

    def normal(self, size, mean: float = 0.0, std: float = 1.0, dtype=np.float64):
        """Gaussian samples via Box-Muller."""
        shape = tuple(size) if np.iterable(size) else (int(size),)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u = self.random_u32(2 * pairs).astype(np.float64)
        u1 = (u[:pairs] + 1.0) / 4294967296.0
        u2 = u[pairs:] / 4294967296.0
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return (mean + std * z[:count]).astype(dtype).reshape(shape)

    def bounded(self, bound: int) -> int:
        """Integer in [0, bound) by multiply-shift."""
        return (self.next_u32() * int(bound)) >> 32

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.random_u32(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = (int(draws[k]) * (i + 1)) >> 32
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def getstate(self) -> tuple[int, int]:
        return self.state, self.inc

    def setstate(self, state: tuple[int, int]):
        self.state, self.inc = int(state[0]), int(state[1])


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed (splitmix64 chain)."""
    x = 0x9E3779B97F4A7C15
    for p in parts:
        x = (x ^ (int(p) & _MASK64)) & _MASK64
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        x = z ^ (z >> 31)
    return x
