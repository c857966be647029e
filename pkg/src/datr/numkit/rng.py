"""Seeded SplitMix64 random stream.

SplitMix64 (Steele, Lea and Flood, 2014; the generator behind Java's
``SplittableRandom`` and the usual seeder for xoshiro) is a counter-based
generator: the k-th output of a stream with state ``s`` is
``mix64(s + k * 0x9E3779B97F4A7C15)``.  That makes block generation a pure
vectorised numpy computation while staying bit-identical to a scalar
reference implementation in any language.

Conversions:

* uniform doubles use the top 53 bits: ``(x >> 11) * 2**-53`` in ``[0, 1)``;
* normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(state: int) -> tuple[int, int]:
    """Scalar reference step: returns ``(new_state, output)``."""
    state = (state + GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Rng:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def get_state(self) -> int:
        return self.state

    def set_state(self, state: int) -> None:
        self.state = int(state) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            k = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + k * np.uint64(GOLDEN)
            out = _mix(z)
        self.state = (self.state + n * GOLDEN) & _MASK
        return out

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key``; leaves this stream untouched."""
        _, z = splitmix64((self.state ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK)) & _MASK)
        return Rng(z)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        out = (low + (high - low) * u).astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform((2 * n,))
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        out = (mean + std * z).astype(dtype)
        return out.reshape(shape) if shape else out[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")


def rng_uniform(rng: Rng, shape, low=0.0, high=1.0, dtype=np.float64) -> np.ndarray:
    return rng.uniform(shape, low, high, dtype)


def rng_normal(rng: Rng, shape, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
    return rng.normal(shape, mean, std, dtype)
