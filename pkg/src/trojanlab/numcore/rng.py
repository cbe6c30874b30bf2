"""Portable seeded random streams.

Every draw is derived from the raw 64-bit output of PCG64 (``numpy.random.PCG64``,
the PCG XSL-RR 128/64 generator), whose sequence for a given seed is fixed and
platform-independent.  The transforms on top (53-bit uniforms, Box-Muller
normals, rejection-sampled integers, Fisher-Yates shuffles) are implemented
here so outputs do not depend on ``numpy.random.Generator`` internals.
"""

from __future__ import annotations

import hashlib

import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0

ALGORITHM = "pcg64-xsl-rr+boxmuller"


class Rng:
    def __init__(self, seed: int) -> None:
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._bits = np.random.PCG64(seed)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(int(n)), dtype=np.uint64)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None, mean: float = 0.0, std: float = 1.0) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])[:n]
        z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in [0, high) by rejection on 64-bit draws."""
        high = int(high)
        if high <= 0:
            raise ValueError(f"high must be positive, got {high}")
        n = 1 if size is None else int(np.prod(size))
        limit = (2**64 // high) * high
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            draws = [int(v) for v in self.raw(n - filled)]
            for v in draws:
                if v < limit:
                    out[filled] = v % high
                    filled += 1
        return int(out[0]) if size is None else out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        idx = np.arange(int(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), in draw order."""
        if k > n:
            raise ValueError(f"cannot choose {k} distinct items from {n}")
        return self.permutation(n)[:k]

    def child(self, *labels) -> "Rng":
        """Independent stream keyed by this seed and ``labels``."""
        h = hashlib.blake2b(digest_size=8)
        h.update(str(self.seed).encode())
        for lab in labels:
            h.update(b"\x1f")
            h.update(str(lab).encode())
        return Rng(int.from_bytes(h.digest(), "little"))
