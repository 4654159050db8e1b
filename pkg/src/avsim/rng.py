"""Seedable portable random streams (PCG32) and inverse-CDF samplers.

Every random draw in the package flows through a Pcg32 instance so that a
(seed, stream) pair fully determines a trajectory, a demand sample, or a
detector noise sequence, independent of platform or evaluation order.

Stream allocation:
    DEMAND_STREAM          demand sampling and the random-ego draw
    DETECTOR_STREAM_BASE   plus frame_id: per-frame detector noise
"""

import math

from scipy.special import ndtr, ndtri

_MASK64 = (1 << 64) - 1
_MULT = 6364136223846793005

DEMAND_STREAM = 1
DETECTOR_STREAM_BASE = 1 << 32


class Pcg32:
    """PCG-XSH-RR 64/32 generator (O'Neill's pcg32), pure Python.

    The algorithm is fixed and documented so a re-implementation in any
    language reproduces the same sequence bit for bit.
    """

    def __init__(self, seed: int, stream: int = 0):
        self._inc = ((stream << 1) | 1) & _MASK64
        self._state = 0
        self.next_u32()
        self._state = (self._state + (seed & _MASK64)) & _MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self._state
        self._state = (old * _MULT + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform in [lo, hi), from one 32-bit draw."""
        return lo + (hi - lo) * (self.next_u32() * 2.0 ** -32)

    def open_unit(self) -> float:
        """Uniform strictly inside (0, 1); safe as a quantile argument."""
        return (self.next_u32() + 0.5) * 2.0 ** -32

    def randrange(self, n: int) -> int:
        """Integer in [0, n). Modulo reduction; bias is < 2**-32 for small n."""
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        return self.next_u32() % n

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        """Gaussian via the inverse CDF; exactly one draw per sample."""
        return mean + std * float(ndtri(self.open_unit()))

    def truncated_normal(self, mean: float, std: float, lo: float, hi: float) -> float:
        """Truncated normal on [lo, hi] via inverse-CDF; one draw per sample."""
        if hi < lo:
            raise ValueError(f"truncation bounds reversed: [{lo}, {hi}]")
        if std < 0:
            raise ValueError("std must be >= 0")
        if std == 0:
            return min(max(mean, lo), hi)
        fa = float(ndtr((lo - mean) / std))
        fb = float(ndtr((hi - mean) / std))
        u = fa + self.open_unit() * (fb - fa)
        x = mean + std * float(ndtri(u))
        return min(max(x, lo), hi)

    def poisson(self, lam: float) -> int:
        """Poisson count by CDF inversion; one draw per sample (small lambda)."""
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        if lam == 0:
            return 0
        u = self.open_unit()
        k = 0
        p = math.exp(-lam)
        cdf = p
        while u > cdf and k < 1000:
            k += 1
            p *= lam / k
            cdf += p
        return k
