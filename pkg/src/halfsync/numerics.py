"""Software binary16 codec and precision-policed array arithmetic.

Tensors are plain numpy arrays whose dtype carries the precision tag:
``float16`` arrays hold only binary16 values (stored as 16-bit patterns),
``float32``/``float64`` hold single/double values. Half-precision arithmetic
follows decode -> operate -> encode, rounding to nearest-even at each step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Precision",
    "PrecisionPolicy",
    "CastStats",
    "NumericFault",
    "encode_half",
    "decode_half",
    "encode_half_array",
    "decode_half_array",
    "cast",
    "quantize",
    "round_half",
    "carrier",
    "matmul",
    "elementwise",
    "check_finite",
]

HALF_MAX = 65504.0
HALF_MIN_NORMAL = 2.0**-14
HALF_MIN_SUBNORMAL = 2.0**-24


class NumericFault(FloatingPointError):
    """NaN/Inf showed up where training cannot continue."""


class Precision(enum.Enum):
    FP16 = "fp16"
    FP32 = "fp32"
    FP64 = "fp64"

    @property
    def nbytes(self) -> int:
        return _NBYTES[self]

    @property
    def dtype(self) -> np.dtype:
        return _DTYPES[self]

    @property
    def code(self) -> int:
        """Wire dtype code (0=fp16, 1=fp32, 2=fp64)."""
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Precision":
        for p, c in _CODES.items():
            if c == code:
                return p
        raise ValueError(f"unknown dtype code {code}")

    @classmethod
    def of(cls, value) -> "Precision":
        """Coerce a tag string, Precision, or numpy dtype."""
        if isinstance(value, Precision):
            return value
        if isinstance(value, str):
            return cls(value.lower())
        dt = np.dtype(value)
        for p, d in _DTYPES.items():
            if d == dt:
                return p
        raise ValueError(f"no precision for dtype {dt}")

    def __lt__(self, other: "Precision") -> bool:
        return self.nbytes < other.nbytes

    def __le__(self, other: "Precision") -> bool:
        return self.nbytes <= other.nbytes


_NBYTES = {Precision.FP16: 2, Precision.FP32: 4, Precision.FP64: 8}
_DTYPES = {
    Precision.FP16: np.dtype(np.float16),
    Precision.FP32: np.dtype(np.float32),
    Precision.FP64: np.dtype(np.float64),
}
_CODES = {Precision.FP16: 0, Precision.FP32: 1, Precision.FP64: 2}


def wider(*ps: Precision) -> Precision:
    return max(ps, key=lambda p: p.nbytes)


@dataclass(frozen=True)
class PrecisionPolicy:
    """Precision for each phase of training.

    ``math`` covers matrix and element-wise products in fprop/bprop, ``sync``
    the values sent over the wire, ``update`` the optimizer arithmetic, and
    ``accumulator`` the width of running sums inside matmul and reductions.
    """

    math: Precision = Precision.FP32
    sync: Precision = Precision.FP32
    update: Precision = Precision.FP32
    accumulator: Precision = Precision.FP32

    @classmethod
    def named(cls, name: str) -> "PrecisionPolicy":
        """Presets: ``fp64``, ``fp32``, ``fp16`` (fp32 accumulate and update),
        ``fp16-strict`` (fp16 everywhere, including accumulation)."""
        f16, f32, f64 = Precision.FP16, Precision.FP32, Precision.FP64
        presets = {
            "fp64": cls(f64, f64, f64, f64),
            "fp32": cls(f32, f32, f32, f32),
            "fp16": cls(f16, f16, f32, f32),
            "fp16-strict": cls(f16, f16, f16, f16),
        }
        try:
            return presets[name]
        except KeyError:
            raise ValueError(f"unknown policy {name!r}; choose from {sorted(presets)}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "PrecisionPolicy":
        return cls(**{k: Precision.of(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: getattr(self, k).value for k in ("math", "sync", "update", "accumulator")}


# ---------------------------------------------------------------------------
# binary16 codec (bit level, vectorized over float64 input)


def encode_half_array(x) -> np.ndarray:
    """Round float64 values to binary16 bit patterns (uint16), nearest-even.

    Overflow goes to signed infinity, subnormals are produced, signed zero
    is preserved, NaN stays NaN (quiet, top payload bits kept).
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.ascontiguousarray(x).view(np.uint64)
    sign = ((u >> np.uint64(63)) & np.uint64(1)).astype(np.int64) << 15
    exp = ((u >> np.uint64(52)) & np.uint64(0x7FF)).astype(np.int64)
    mant = (u & np.uint64((1 << 52) - 1)).astype(np.int64)

    e = exp - 1023
    sig = mant | (1 << 52)
    # 42 bits drop for a normal half; extra bits for the subnormal range.
    shift = np.clip(42 + np.maximum(-14 - e, 0), 42, 62)
    q = sig >> shift
    rem = sig & ((np.int64(1) << shift) - 1)
    halfway = np.int64(1) << (shift - 1)
    up = (rem > halfway) | ((rem == halfway) & ((q & 1) == 1))
    q = q + up
    out = (np.maximum(e + 14, 0) << 10) + q
    out = np.where(e > 15, 0x7C00, np.minimum(out, 0x7C00))
    out = np.where(exp == 0, 0, out)  # float64 zero/subnormal -> signed zero
    nan_bits = 0x7C00 | 0x0200 | (mant >> 42)
    out = np.where(exp == 0x7FF, np.where(mant != 0, nan_bits, 0x7C00), out)
    return (out | sign).astype(np.uint16)


def decode_half_array(h) -> np.ndarray:
    """Exact float64 values of binary16 bit patterns."""
    h = np.asarray(h).astype(np.int64)
    sign = np.where(h & 0x8000, -1.0, 1.0)
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF
    normal = np.ldexp((1024 + mant).astype(np.float64), exp - 25)
    sub = np.ldexp(mant.astype(np.float64), -24)
    mag = np.where(exp == 0, sub, normal)
    mag = np.where(exp == 31, np.where(mant == 0, np.inf, np.nan), mag)
    return sign * mag


def encode_half(x: float) -> int:
    """Binary16 bit pattern for ``x`` (round-to-nearest-even)."""
    return int(encode_half_array(np.float64(x)).item())


def decode_half(h: int) -> float:
    if not 0 <= h <= 0xFFFF:
        raise ValueError(f"not a 16-bit pattern: {h}")
    return float(decode_half_array(h).item())


# ---------------------------------------------------------------------------
# casting and arithmetic
#
# Compute paths carry fp16 values in float32 arrays ("carrier"), rounding with
# round_half after every operation; float16 arrays are used for storage and the
# wire. numpy's own float16 conversion raises the underflow flag per element,
# which is ~20x slower for subnormal results.


_ROUND_BITS = {
    # dtype: (uint view, mantissa bits dropped, magic constant for the subnormal grid)
    np.dtype(np.float32): (np.uint32, 13, np.float32(0.5)),
    np.dtype(np.float64): (np.uint64, 42, np.float64(2.0**28)),
}


def round_half(x) -> np.ndarray:
    """Round float32/float64 values to the nearest binary16 value (ties to even).

    The result keeps the input dtype. Values beyond the binary16 range become
    signed infinity; NaN passes through.
    """
    x = np.asarray(x)
    if x.dtype not in _ROUND_BITS:
        x = x.astype(np.float64)
    uint, drop, magic = _ROUND_BITS[x.dtype]
    # normal range: integer round-to-nearest-even on the raw mantissa bits;
    # the carry never reaches the sign bit
    bits = np.ascontiguousarray(x).view(uint)
    lsb = (bits >> uint(drop)) & uint(1)
    r = ((bits + uint((1 << (drop - 1)) - 1) + lsb) & ~uint((1 << drop) - 1)).view(x.dtype)
    ax = np.abs(x)
    # subnormal range: the FPU rounds to the 2^-24 grid when adding magic
    small = ax < HALF_MIN_NORMAL
    if small.any():
        r = np.where(small, np.copysign((ax + magic) - magic, x), r)
    with np.errstate(invalid="ignore"):
        big = ~(np.abs(r) <= HALF_MAX)  # also true for NaN
    if big.any():
        r = np.where(big, np.where(np.isnan(x), x, np.copysign(x.dtype.type(np.inf), x)), r)
    return r


def carrier(precision: Precision) -> np.dtype:
    """dtype used to compute at ``precision`` (float32 for fp16)."""
    return np.dtype(np.float64) if precision == Precision.FP64 else np.dtype(np.float32)


def quantize(x, precision: Precision) -> np.ndarray:
    """Round to ``precision`` and return the values in its carrier dtype."""
    x = np.asarray(x)
    if precision == Precision.FP16:
        if x.dtype == np.float16:
            return x.astype(np.float32)
        if x.dtype != np.float64:
            x = x.astype(np.float32, copy=False)
        return round_half(x).astype(np.float32, copy=False)
    with np.errstate(over="ignore"):
        return x.astype(carrier(precision), copy=False)


@dataclass
class CastStats:
    """Running tally of values lost by narrowing casts."""

    overflow: int = 0
    underflow: int = 0

    def add(self, other: "CastStats") -> None:
        self.overflow += other.overflow
        self.underflow += other.underflow


def cast(x, precision: Precision, stats: CastStats | None = None) -> np.ndarray:
    """Round every element to ``precision`` (nearest-even), in its storage dtype.

    Finite values that become infinite are counted as overflow, non-zero
    values that become zero as underflow, in ``stats`` when given.
    """
    precision = Precision.of(precision)
    x = np.asarray(x)
    if precision == Precision.FP16 and x.dtype != np.float16:
        out = round_half(x if x.dtype in _ROUND_BITS else x.astype(np.float64)).astype(np.float16)
    else:
        with np.errstate(over="ignore", invalid="ignore"):
            out = x.astype(precision.dtype)
    if stats is not None and out.dtype.itemsize < x.dtype.itemsize:
        stats.overflow += int(np.count_nonzero(np.isinf(out) & np.isfinite(x)))
        stats.underflow += int(np.count_nonzero((out == 0) & (x != 0)))
    return out


_BLOCK = 1 << 14  # max scalar products materialized at once


@np.errstate(over="ignore", invalid="ignore")  # inf/NaN propagate as on hardware
def matmul(a, b, policy: PrecisionPolicy) -> np.ndarray:
    """2-D matrix product under ``policy``.

    Every scalar product is rounded to ``policy.math``; the products are summed
    left to right along the inner dimension at ``policy.accumulator``; the sum
    is rounded to ``policy.math``. The result comes back in the carrier dtype
    of ``policy.math`` (float32 for fp16).
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    math, acc = policy.math, policy.accumulator
    m, k = a.shape
    n = b.shape[1]
    a = quantize(a, math)
    b = quantize(b, math)
    if k == 0:
        return np.zeros((m, n), dtype=carrier(math))
    # fp16 x fp16 is exact in float32, so rounding the float32 product is a
    # single rounding; fp32/fp64 products are rounded by the multiply itself.
    rnd = round_half if math == Precision.FP16 else (lambda v: v)

    if acc == Precision.FP16:
        # fp16 + fp16 is exact in float64, so each step rounds once
        total = np.zeros((m, n), dtype=np.float64)
        for j in range(k):
            term = rnd(a[:, j, None] * b[None, j, :]).astype(np.float64)
            total = round_half(total + term)
        return quantize(total, math)

    acc_dt = carrier(acc) if acc != Precision.FP64 else np.dtype(np.float64)
    step = max(1, _BLOCK // max(1, m * n))
    at = np.ascontiguousarray(a.T)
    total = np.zeros((m, n), dtype=acc_dt)
    for j0 in range(0, k, step):
        blk = rnd(at[j0:j0 + step, :, None] * b[j0:j0 + step, None, :]).astype(acc_dt, copy=False)
        # explicit left-to-right accumulation (numpy's reductions may reorder)
        for row in blk:
            total += row
    return quantize(total, math)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


_UNARY = {
    "sigmoid": _sigmoid,
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
}
_BINARY = {"add": np.add, "mul": np.multiply}


def elementwise(op: str, *args, policy: PrecisionPolicy) -> np.ndarray:
    """Apply ``op`` per element and round the result to ``policy.math``.

    Inputs are first rounded to ``policy.math``; the operation itself runs in
    float64, which is exact for add/mul of fp16 operands. The result is in the
    carrier dtype.
    """
    xs = [quantize(a, policy.math).astype(np.float64) for a in args]
    if op in _UNARY:
        if len(xs) != 1:
            raise ValueError(f"{op} takes one argument")
        with np.errstate(over="ignore"):
            res = _UNARY[op](xs[0])
    elif op in _BINARY:
        if len(xs) != 2:
            raise ValueError(f"{op} takes two arguments")
        if xs[0].shape != xs[1].shape:
            raise ValueError(f"shape mismatch: {xs[0].shape} vs {xs[1].shape}")
        res = _BINARY[op](xs[0], xs[1])
    else:
        raise ValueError(f"unknown op {op!r}")
    return quantize(res, policy.math)


def check_finite(x, what: str) -> None:
    if not np.all(np.isfinite(x)):
        bad = int(np.count_nonzero(~np.isfinite(x)))
        raise NumericFault(f"{bad} non-finite values in {what}")
