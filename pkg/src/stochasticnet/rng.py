"""Counter-based 64-bit random streams built on the splitmix64 finalizer.

Every variate is a pure function of ``(key, counter)``, so any subset of a
stream can be generated in any order and still match bit for bit.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

# Stream tags used when deriving per-layer keys.
STREAM_MASK = 0
STREAM_INIT = 1


def mix64(z: int) -> int:
    """splitmix64 output function on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *ids: int) -> int:
    """Fold integer ids into ``seed`` to get an independent 64-bit key."""
    h = mix64(int(seed) & MASK64)
    for i in ids:
        h = mix64(h ^ ((int(i) + GOLDEN) & MASK64))
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def raw64(key: int, counters) -> np.ndarray:
    """Mixed 64-bit words for each counter under ``key``."""
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(int(key) & MASK64) + (c + np.uint64(1)) * np.uint64(GOLDEN)
        return _mix64_array(z)


def uniform(key: int, counters) -> np.ndarray:
    """Uniform variates in [0, 1): top 53 bits of the mixed word over 2**53."""
    return (raw64(key, counters) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def uniform_stream(key: int, n: int) -> np.ndarray:
    return uniform(key, np.arange(n, dtype=np.uint64))


def variate(key: int, counter: int) -> float:
    """Scalar reference path for a single variate (pure Python ints)."""
    z = mix64((int(key) + (int(counter) + 1) * GOLDEN) & MASK64)
    return (z >> 11) * 2.0**-53
