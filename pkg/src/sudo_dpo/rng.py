"""Seedable splitmix64 streams with Box-Muller normals.

Every random draw in the package goes through :class:`Rng` so that training
runs, downgrade choices and evaluations replay bit-for-bit from a seed.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
TWO_POW_M53 = 2.0**-53

_GAMMA_U = np.uint64(GAMMA)
_MIX1_U = np.uint64(MIX1)
_MIX2_U = np.uint64(MIX2)


def mix64(z: int) -> int:
    """splitmix64 output function applied to an already-advanced state."""
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *labels: int) -> int:
    """Child seed for a labelled sub-stream: fold ``mix64(s + gamma ^ label)``."""
    s = seed & MASK64
    for label in labels:
        s = mix64(((s ^ (label & MASK64)) + GAMMA) & MASK64)
    return s


def parse_seed(text: str) -> int:
    """Accept decimal or 0x-prefixed hex."""
    value = int(text, 0)
    if value < 0 or value > MASK64:
        raise ValueError(f"seed out of 64-bit range: {text}")
    return value


class Rng:
    """splitmix64 generator.

    ``state`` is the raw 64-bit counter; ``cached_gaussian`` holds the second
    Box-Muller output until the next normal draw consumes it.
    """

    __slots__ = ("state", "cached_gaussian")

    def __init__(self, seed: int = 0):
        self.state = seed & MASK64
        self.cached_gaussian: float | None = None

    def copy(self) -> "Rng":
        other = Rng(self.state)
        other.cached_gaussian = self.cached_gaussian
        return other

    def child(self, *labels: int) -> "Rng":
        """Independent stream derived from the current state and ``labels``.

        Does not advance this generator.
        """
        return Rng(derive_seed(self.state, *labels))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """``n`` consecutive outputs as uint64, identical to ``n`` next_u64 calls."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = steps * _GAMMA_U + np.uint64(self.state)
        self.state = int(z[-1])
        z = (z ^ (z >> np.uint64(30))) * _MIX1_U
        z = (z ^ (z >> np.uint64(27))) * _MIX2_U
        return z ^ (z >> np.uint64(31))

    def uniform01(self) -> float:
        return (self.next_u64() >> 11) * TWO_POW_M53

    def uniforms(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * TWO_POW_M53

    def randbelow(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` as ``floor(uniform01 * n)``."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        return min(int(self.uniform01() * n), n - 1)

    def integers(self, n: int, size: int) -> np.ndarray:
        """``size`` draws of :meth:`randbelow` in one call."""
        if n <= 0:
            raise ValueError("integers needs n >= 1")
        idx = np.floor(self.uniforms(size) * n).astype(np.int64)
        return np.minimum(idx, n - 1)

    def gaussian(self) -> float:
        return float(self.normals(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normals; same values as ``n`` sequential gaussian() calls."""
        out = np.empty(n, dtype=np.float64)
        if n == 0:
            return out
        start = 0
        if self.cached_gaussian is not None:
            out[0] = self.cached_gaussian
            self.cached_gaussian = None
            start = 1
        remaining = n - start
        if remaining == 0:
            return out
        n_pairs = (remaining + 1) // 2
        u = self.uniforms(2 * n_pairs)
        u1 = u[0::2]
        u2 = u[1::2]
        u1 = np.where(u1 == 0.0, TWO_POW_M53, u1)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        pairs = np.empty(2 * n_pairs, dtype=np.float64)
        pairs[0::2] = r * np.cos(theta)
        pairs[1::2] = r * np.sin(theta)
        out[start:] = pairs[:remaining]
        if remaining < 2 * n_pairs:
            self.cached_gaussian = float(pairs[-1])
        return out

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return self.normals(int(np.prod(shape, dtype=np.int64))).reshape(shape)
