"""Gaussian connectivity model and deterministic connectivity masks.

A connection at receptive-field offset ``(dy, dx)`` exists with probability
``min(1, c * exp(-(dy^2 + dx^2) / (2 sigma^2)))`` where the scale ``c`` is
calibrated so the mean probability over the field equals the target
connectivity. Masks are sampled once per filter tap and shared across all
spatial positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng

BISECT_MAX_ITER = 64
BISECT_TOL = 1e-9


def _check_rho(rho: float) -> float:
    rho = float(rho)
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"connectivity must lie in (0, 1], got {rho}")
    return rho


@dataclass(frozen=True)
class GaussianConnectivityModel:
    kernel_size: int
    sigma: float
    rho: float

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        _check_rho(self.rho)

    @classmethod
    def preset(cls, kernel_size: int = 5, rho: float = 0.75) -> "GaussianConnectivityModel":
        """Sigma fixed at a third of the receptive field size."""
        return cls(kernel_size, kernel_size / 3.0, rho)


@dataclass(frozen=True)
class ProbabilityMap:
    k: int
    p: np.ndarray = field(repr=False)
    scale: float

    @property
    def mean(self) -> float:
        return float(self.p.mean())

    def at(self, dy: int, dx: int) -> float:
        """Probability at offset ``(dy, dx)`` from the field center."""
        r = self.k // 2
        return float(self.p[dy + r, dx + r])


def gaussian_profile(k: int, sigma: float) -> np.ndarray:
    r = k // 2
    off = np.arange(-r, r + 1, dtype=np.float64)
    d2 = off[:, None] ** 2 + off[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def probability_map(model: GaussianConnectivityModel) -> ProbabilityMap:
    rho = _check_rho(model.rho)
    g = gaussian_profile(model.kernel_size, model.sigma)
    g_min = float(g.min())
    if g_min <= 0.0:
        raise ValueError(f"sigma={model.sigma} too small: outer taps underflow to zero")
    lo, hi = rho, rho / g_min
    if rho == 1.0:
        return ProbabilityMap(model.kernel_size, np.ones_like(g), hi)

    def excess(c: float) -> float:
        return float(np.minimum(1.0, c * g).mean()) - rho

    # Midpoints are geometric: for narrow kernels the bracket spans many
    # orders of magnitude and arithmetic halving would not converge in time.
    c = lo
    for _ in range(BISECT_MAX_ITER):
        c = math.sqrt(lo * hi)
        e = excess(c)
        if abs(e) <= BISECT_TOL:
            break
        if e < 0:
            lo = c
        else:
            hi = c
    return ProbabilityMap(model.kernel_size, np.minimum(1.0, c * g), c)


@dataclass
class ConnectivityMask:
    """Binary gate congruent to a weight tensor."""

    bits: np.ndarray
    seed: int

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if self.bits.size and self.bits.max() > 1:
            raise ValueError("mask bits must be 0 or 1")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.bits.shape

    @property
    def realized_fraction(self) -> float:
        return float(self.bits.mean())

    @property
    def surviving(self) -> int:
        return int(self.bits.sum())

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    def pack(self) -> bytes:
        """Little-endian bitfield, row-major, padded to a byte boundary."""
        return np.packbits(self.bits.ravel(), bitorder="little").tobytes()

    @classmethod
    def unpack(cls, data: bytes, shape, seed: int) -> "ConnectivityMask":
        n = math.prod(shape)
        raw = np.frombuffer(data, dtype=np.uint8)
        bits = np.unpackbits(raw, count=n, bitorder="little")
        return cls(bits.reshape(shape), seed)

    def __eq__(self, other):
        if not isinstance(other, ConnectivityMask):
            return NotImplemented
        return (self.seed == other.seed and self.shape == other.shape
                and bool(np.array_equal(self.bits, other.bits)))


def realize_conv_mask(pm: ProbabilityMap, out_channels: int, in_channels: int,
                      seed: int) -> ConnectivityMask:
    """Sample an ``[out, in, k, k]`` mask; variate index is the row-major bit offset."""
    if out_channels < 1 or in_channels < 1:
        raise ValueError("channel counts must be positive")
    shape = (out_channels, in_channels, pm.k, pm.k)
    u = rng.uniform_stream(seed, math.prod(shape)).reshape(shape)
    return ConnectivityMask((u < pm.p).astype(np.uint8), seed)


def realize_dense_mask(in_dim: int, out_dim: int, rho: float, seed: int) -> ConnectivityMask:
    rho = _check_rho(rho)
    if in_dim < 1 or out_dim < 1:
        raise ValueError("dense dims must be positive")
    u = rng.uniform_stream(seed, in_dim * out_dim).reshape(out_dim, in_dim)
    return ConnectivityMask((u < rho).astype(np.uint8), seed)


def binomial_bound(n: int, p: float, n_sigma: float = 5.0) -> float:
    """Half-width of an ``n_sigma`` band on a binomial fraction."""
    return n_sigma * math.sqrt(p * (1.0 - p) / n)
