"""Numeric substrates: the prime field used by Shamir sharing and the
2^64 ring with fixed-point encoding used by the additive 2PC backend.

Field elements are plain Python ints in ``[0, p)``. Ring elements are
``numpy.uint64`` values (scalars or arrays); numpy wraps uint64 arithmetic
mod 2^64, which is exactly the ring semantics we want.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DuplicatePoint, NonFinite, RangeOverflow, ZeroInverse

# Mersenne prime 2^61 - 1
P61 = (1 << 61) - 1

RING_BITS = 64
RING_MOD = 1 << RING_BITS


# ---------------------------------------------------------------- field


def fadd(a: int, b: int, p: int = P61) -> int:
    return (a + b) % p


def fsub(a: int, b: int, p: int = P61) -> int:
    return (a - b) % p


def fmul(a: int, b: int, p: int = P61) -> int:
    return (a * b) % p


def fneg(a: int, p: int = P61) -> int:
    return (-a) % p


def field_inverse(a: int, p: int = P61) -> int:
    a %= p
    if a == 0:
        raise ZeroInverse("0 has no multiplicative inverse")
    return pow(a, p - 2, p)


def poly_eval(coeffs: Sequence[int], x: int, p: int = P61) -> int:
    """Horner evaluation; ``coeffs[0]`` is the constant term."""
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * x + c) % p
    return acc


def lagrange_coefficients(xs: Sequence[int], target: int = 0, p: int = P61) -> list[int]:
    """Weights ``lam`` with ``sum(lam[i] * q(xs[i])) == q(target)`` for deg q < len(xs)."""
    xs = [x % p for x in xs]
    if not xs:
        raise DuplicatePoint("need at least one interpolation point")
    if len(set(xs)) != len(xs):
        raise DuplicatePoint(f"interpolation points not distinct: {xs}")
    target %= p
    lams = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if i == j:
                continue
            num = num * (target - xj) % p
            den = den * (xi - xj) % p
        lams.append(num * field_inverse(den, p) % p)
    return lams


def field_to_bytes(a: int) -> bytes:
    return struct.pack("<Q", a)


def field_from_bytes(b: bytes, p: int = P61) -> int:
    (v,) = struct.unpack("<Q", b)
    return v % p


# ---------------------------------------------------------------- ring / fixed point


@dataclass(frozen=True)
class FixedPointConfig:
    frac_bits: int = 24
    int_bits: int = 20

    def __post_init__(self):
        if self.frac_bits < 0 or self.int_bits < 0:
            raise ValueError("bit counts must be non-negative")
        if self.frac_bits + self.int_bits + 1 > RING_BITS:
            raise ValueError(
                f"frac_bits + int_bits + sign = {self.frac_bits + self.int_bits + 1} exceeds {RING_BITS}"
            )

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits


DEFAULT_FXP = FixedPointConfig()


def encode_fixed(x, cfg: FixedPointConfig = DEFAULT_FXP, frac_bits: int | None = None):
    """Encode reals as signed fixed-point values embedded in Z_{2^64}.

    Rounds half away from zero. Works elementwise on arrays; a Python/numpy
    scalar in gives a ``np.uint64`` scalar out.
    """
    f = cfg.frac_bits if frac_bits is None else frac_bits
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("cannot encode non-finite value")
    limit = 2.0 ** cfg.int_bits
    if arr.size and np.max(np.abs(arr)) >= limit:
        raise RangeOverflow(f"|x| = {np.max(np.abs(arr))} outside fixed-point range 2^{cfg.int_bits}")
    scaled = arr * float(1 << f)
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    out = rounded.astype(np.int64).view(np.uint64)
    if out.ndim == 0:
        return np.uint64(out[()])
    return out


def to_signed(r) -> np.ndarray:
    """Signed (two's-complement) view of ring elements."""
    arr = np.asarray(r, dtype=np.uint64)
    return arr.view(np.int64)


def decode_fixed(r, cfg: FixedPointConfig = DEFAULT_FXP, frac_bits: int | None = None):
    f = cfg.frac_bits if frac_bits is None else frac_bits
    arr = np.asarray(r, dtype=np.uint64)
    vals = arr.view(np.int64).astype(np.float64) / float(1 << f)
    if vals.ndim == 0:
        return float(vals[()])
    return vals


def ring_to_bytes(r) -> bytes:
    return np.asarray(r, dtype="<u8").tobytes()


def ring_from_bytes(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype="<u8").astype(np.uint64)


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform elements of Z_{2^64}."""
    return rng.integers(0, np.iinfo(np.uint64).max, size=shape, dtype=np.uint64, endpoint=True)


def ring_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product mod 2^64 (numpy integer matmul wraps)."""
    return np.matmul(a.astype(np.uint64, copy=False), b.astype(np.uint64, copy=False))


def trunc_shift_signed(x: np.ndarray, bits: int) -> np.ndarray:
    """Arithmetic right shift of ring elements read as signed integers."""
    return (to_signed(x) >> bits).view(np.uint64)


@dataclass(frozen=True)
class ShareMatrix:
    """One party's additive shares of a matrix.

    ``frac`` is the fixed-point scale of the hidden value (0 for integer
    indicators, ``cfg.frac_bits`` for ordinary values).
    """

    party: int
    data: np.ndarray
    frac: int = DEFAULT_FXP.frac_bits

    def __post_init__(self):
        if self.party not in (0, 1):
            raise ValueError(f"party must be 0 or 1, got {self.party}")
        if self.data.dtype != np.uint64 or self.data.ndim != 2:
            raise ValueError("share data must be a 2-D uint64 array")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]
