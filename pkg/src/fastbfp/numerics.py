"""FP32 to block floating point conversion.

A BFP group stores one shared exponent and ``g`` sign-magnitude mantissas of
``m`` bits each.  Mantissas carry their leading bit explicitly and the binary
point sits right after bit ``m - 1``, so element ``i`` of a group is::

    signs[i] * mantissas[i] * 2 ** (shared_exponent - (m - 1))

Conversion follows the hardware converter: find the largest exponent in the
group, right-shift every 24-bit significand by its distance to that exponent,
optionally add stochastic noise to the bits just below the kept ones, and
truncate to ``m`` bits.  Subnormal inputs are flushed to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import NonFiniteInput

ZERO_EXPONENT = int(np.iinfo(np.int32).min)
"""Exponent sentinel for zero values and all-zero groups."""

FP32_SIGNIFICAND_BITS = 24
MAX_MANTISSA_BITS = 16
MAX_NOISE_BITS = 32
DEFAULT_GROUP_SIZE = 16
DEFAULT_EXPONENT_BITS = 3


@dataclass(frozen=True)
class FpScalar:
    """Sign, unbiased exponent and fraction in [1, 2) of a normal FP32 value."""

    sign: int
    exponent: int
    mantissa_frac: float

    @property
    def is_zero(self) -> bool:
        return self.mantissa_frac == 0

    def __float__(self) -> float:
        if self.is_zero:
            return 0.0
        return self.sign * math.ldexp(self.mantissa_frac, self.exponent)


ZERO = FpScalar(1, ZERO_EXPONENT, 0.0)


@dataclass(frozen=True)
class RoundingMode:
    """How aligned mantissas are cut down to ``m`` bits.

    ``kind`` is one of ``"truncate"``, ``"nearest"`` or ``"stochastic"``;
    ``noise_bits`` only matters for stochastic rounding, where that many
    uniformly random bits are added below the kept mantissa before truncation.
    """

    kind: str
    noise_bits: int = 3

    def __post_init__(self) -> None:
        if self.kind not in ("truncate", "nearest", "stochastic"):
            raise ValueError(f"unknown rounding mode {self.kind!r}")
        if not 1 <= self.noise_bits <= MAX_NOISE_BITS:
            raise ValueError(f"noise_bits must be in [1, {MAX_NOISE_BITS}], got {self.noise_bits}")

    @classmethod
    def stochastic(cls, noise_bits: int = 3) -> RoundingMode:
        return cls("stochastic", noise_bits)

    @classmethod
    def parse(cls, text: str, noise_bits: int = 3) -> RoundingMode:
        return cls(text.lower(), noise_bits)

    @property
    def is_stochastic(self) -> bool:
        return self.kind == "stochastic"

    def __str__(self) -> str:
        if self.is_stochastic:
            return f"stochastic({self.noise_bits})"
        return self.kind


TRUNCATE = RoundingMode("truncate")
NEAREST = RoundingMode("nearest")
STOCHASTIC = RoundingMode("stochastic", 3)


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    """Counter-based generator (Philox) standing in for the converter's LFSR."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# FP32 decomposition


def split_fp32(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised FP32 field split.

    Returns ``(sign, exponent, significand)`` where the significand is the
    24-bit integer with the hidden bit made explicit, so that
    ``|x| == significand * 2 ** (exponent - 23)``.  Zeros and subnormals come
    back as ``(+1, ZERO_EXPONENT, 0)``.
    """
    bits = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.int64)
    biased = (bits >> 23) & 0xFF
    if np.any(biased == 0xFF):
        raise NonFiniteInput("NaN or infinity in input")
    normal = biased != 0
    sign = np.where(normal & (bits >> 31 == 1), -1, 1).astype(np.int8)
    exponent = np.where(normal, biased - 127, ZERO_EXPONENT).astype(np.int64)
    significand = np.where(normal, (bits & 0x7FFFFF) | 0x800000, 0).astype(np.int64)
    return sign, exponent, significand


def decompose_fp(x: float) -> FpScalar:
    """Split a value (rounded to FP32 first) into sign, exponent and fraction."""
    sign, exponent, significand = split_fp32(np.array([x], dtype=np.float64))
    if significand[0] == 0:
        return ZERO
    return FpScalar(int(sign[0]), int(exponent[0]), int(significand[0]) / (1 << 23))


def fp32_ftz(values: np.ndarray) -> np.ndarray:
    """Round to FP32 and flush subnormal results to (positive) zero.

    Magnitudes beyond the FP32 range become infinities, which the training
    harness reports as divergence.
    """
    with np.errstate(over="ignore"):
        out = np.asarray(values, dtype=np.float64).astype(np.float32)
    tiny = np.abs(out) < np.finfo(np.float32).tiny
    if np.any(tiny):
        out = np.where(tiny, np.float32(0.0), out)
    return out


# ---------------------------------------------------------------------------
# Group-level kernels on (..., g) arrays


def _check_m(m: int) -> None:
    if not 1 <= m <= MAX_MANTISSA_BITS:
        raise ValueError(f"mantissa bits must be in [1, {MAX_MANTISSA_BITS}], got {m}")


def _quantize_fields(
    exponent: np.ndarray,
    significand: np.ndarray,
    m: int,
    mode: RoundingMode,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Shared exponents and m-bit mantissas for grouped fields of shape (..., g)."""
    shared = exponent.max(axis=-1)
    # Distance of the significand's LSB to the LSB of an m-bit mantissa anchored
    # at the shared exponent.  Always >= 24 - m > 0.
    shift = (FP32_SIGNIFICAND_BITS - m) + (shared[..., None] - exponent)
    shift = np.where(significand == 0, 63, shift)

    if mode.kind == "truncate":
        q = significand >> np.minimum(shift, 63)
    elif mode.kind == "nearest":
        s = np.minimum(shift, 62)
        q = (significand + (np.int64(1) << (s - 1))) >> s
    else:
        if rng is None:
            raise ValueError("stochastic rounding needs an rng")
        n = mode.noise_bits
        extra = shift - n
        kept = np.where(
            extra >= 0,
            significand >> np.clip(extra, 0, 63),
            significand << np.clip(-extra, 0, 63),
        )
        noise = rng.integers(0, 1 << n, size=significand.shape, dtype=np.int64)
        q = (kept + noise) >> n
    # Rounding up the largest element can carry out of m bits; saturate.
    q = np.minimum(q, (1 << m) - 1)
    return shared, q


def _dequantize_fields(
    shared: np.ndarray, signs: np.ndarray, mantissas: np.ndarray, m: int
) -> np.ndarray:
    scale = np.clip(shared - (m - 1), -4000, 4000)[..., None]
    values = np.ldexp((signs * mantissas).astype(np.float64), scale.astype(np.int32))
    return values.astype(np.float32)


# ---------------------------------------------------------------------------
# Single group


@dataclass(frozen=True)
class BfpGroup:
    shared_exponent: int
    m: int
    signs: tuple[int, ...]
    mantissas: tuple[int, ...]

    def __post_init__(self) -> None:
        _check_m(self.m)
        if len(self.signs) != len(self.mantissas) or not self.mantissas:
            raise ValueError("signs and mantissas must be non-empty and of equal length")
        limit = 1 << self.m
        for s, q in zip(self.signs, self.mantissas):
            if s not in (1, -1):
                raise ValueError(f"sign must be +1 or -1, got {s}")
            if not 0 <= q < limit:
                raise ValueError(f"mantissa {q} does not fit in {self.m} bits")

    @property
    def g(self) -> int:
        return len(self.mantissas)

    @property
    def is_zero(self) -> bool:
        return not any(self.mantissas)

    def signed_mantissas(self) -> list[int]:
        return [s * q for s, q in zip(self.signs, self.mantissas)]


def quantize_group(
    values: Sequence[float],
    m: int,
    mode: RoundingMode = TRUNCATE,
    rng: int | np.random.Generator | None = None,
    g: int | None = None,
) -> BfpGroup:
    """Convert up to ``g`` values into one BFP group (zero-padded to ``g``)."""
    _check_m(m)
    x = np.asarray(values, dtype=np.float32).ravel()
    g = len(x) if g is None else g
    if len(x) > g or g < 1:
        raise ValueError(f"group holds {g} values, got {len(x)}")
    x = np.pad(x, (0, g - len(x)))
    sign, exponent, significand = split_fp32(x)
    gen = make_rng(rng) if mode.is_stochastic else None
    shared, q = _quantize_fields(exponent, significand, m, mode, gen)
    return BfpGroup(
        int(shared),
        m,
        tuple(int(s) for s in sign),
        tuple(int(v) for v in q),
    )


def dequantize_group(grp: BfpGroup) -> list[float]:
    vals = _dequantize_fields(
        np.int64(grp.shared_exponent),
        np.asarray(grp.signs, dtype=np.int64),
        np.asarray(grp.mantissas, dtype=np.int64),
        grp.m,
    )
    return [float(v) for v in vals]


# ---------------------------------------------------------------------------
# Tensors


@dataclass(frozen=True, eq=False)
class BfpTensor:
    """A tensor quantized into groups along one axis.

    Field arrays are laid out as ``(rows, groups_per_row, g)`` where ``rows``
    runs over every index of the non-grouped axes in C order and the last
    group of each row is zero-padded.  Group ``k`` of the flat sequence is
    ``(k // groups_per_row, k % groups_per_row)``.
    """

    shape: tuple[int, ...]
    axis: int
    m: int
    g: int
    shared_exponents: np.ndarray
    signs: np.ndarray
    mantissas: np.ndarray
    e_bits: int = DEFAULT_EXPONENT_BITS

    def __post_init__(self) -> None:
        # Stored operands are never modified in place (the systolic modes rely
        # on reading them without reorientation).
        for arr in (self.shared_exponents, self.signs, self.mantissas):
            arr.flags.writeable = False

    @property
    def n_groups(self) -> int:
        return int(self.shared_exponents.size)

    @property
    def groups_per_row(self) -> int:
        return int(self.shared_exponents.shape[1])

    def group(self, k: int) -> BfpGroup:
        row, col = divmod(k, self.groups_per_row)
        return BfpGroup(
            int(self.shared_exponents[row, col]),
            self.m,
            tuple(int(s) for s in self.signs[row, col]),
            tuple(int(q) for q in self.mantissas[row, col]),
        )

    def groups(self) -> Iterator[BfpGroup]:
        for k in range(self.n_groups):
            yield self.group(k)

    def signed_mantissas(self) -> np.ndarray:
        return self.signs.astype(np.int64) * self.mantissas

    def dequantize(self) -> np.ndarray:
        vals = _dequantize_fields(self.shared_exponents, self.signs, self.mantissas, self.m)
        return _ungroup(vals, self.shape, self.axis)

    def same_as(self, other: BfpTensor) -> bool:
        """Bit-identical comparison of format and contents."""
        return (
            self.shape == other.shape
            and self.axis == other.axis
            and self.m == other.m
            and self.g == other.g
            and self.e_bits == other.e_bits
            and np.array_equal(self.shared_exponents, other.shared_exponents)
            and np.array_equal(self.signs, other.signs)
            and np.array_equal(self.mantissas, other.mantissas)
        )

    @classmethod
    def from_groups(
        cls,
        groups: Sequence[BfpGroup],
        shape: tuple[int, ...],
        axis: int = -1,
        e_bits: int = DEFAULT_EXPONENT_BITS,
    ) -> BfpTensor:
        shape = tuple(shape)
        axis = axis % len(shape)
        g, m = groups[0].g, groups[0].m
        per_row = math.ceil(shape[axis] / g)
        rows = math.prod(shape) // shape[axis] if shape[axis] else 0
        if len(groups) != rows * per_row:
            raise ValueError(f"expected {rows * per_row} groups, got {len(groups)}")
        exps = np.array([grp.shared_exponent for grp in groups], dtype=np.int64)
        signs = np.array([grp.signs for grp in groups], dtype=np.int8)
        mants = np.array([grp.mantissas for grp in groups], dtype=np.int64)
        return cls(
            shape,
            axis,
            m,
            g,
            exps.reshape(rows, per_row),
            signs.reshape(rows, per_row, g),
            mants.reshape(rows, per_row, g),
            e_bits,
        )


def _group_view(x: np.ndarray, axis: int, g: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, -1)
    n = moved.shape[-1]
    rows = moved.reshape(-1, n)
    per_row = math.ceil(n / g)
    padded = np.zeros((rows.shape[0], per_row * g), dtype=x.dtype)
    padded[:, :n] = rows
    return padded.reshape(rows.shape[0], per_row, g)


def _ungroup(grouped: np.ndarray, shape: tuple[int, ...], axis: int) -> np.ndarray:
    n = shape[axis]
    moved_shape = tuple(s for i, s in enumerate(shape) if i != axis) + (n,)
    flat = grouped.reshape(grouped.shape[0], -1)[:, :n]
    return np.moveaxis(flat.reshape(moved_shape), -1, axis)


def quantize_tensor(
    t: np.ndarray,
    m: int,
    g: int = DEFAULT_GROUP_SIZE,
    mode: RoundingMode = TRUNCATE,
    rng: int | np.random.Generator | None = None,
    axis: int = -1,
    e_bits: int = DEFAULT_EXPONENT_BITS,
) -> BfpTensor:
    """Quantize ``t`` with groups of ``g`` consecutive elements along ``axis``.

    ``axis`` should be the reduction axis of the dot products the tensor
    feeds.  Stochastic noise is drawn in flat group order, one block of ``g``
    draws per group, so group ``k`` always sees draws ``k*g .. k*g + g - 1``
    of the generator stream.
    """
    _check_m(m)
    x = np.asarray(t, dtype=np.float32)
    if x.ndim == 0:
        x = x.reshape(1)
    axis = axis % x.ndim
    sign, exponent, significand = split_fp32(_group_view(x, axis, g))
    gen = make_rng(rng) if mode.is_stochastic else None
    shared, q = _quantize_fields(exponent, significand, m, mode, gen)
    return BfpTensor(x.shape, axis, m, g, shared, sign, q, e_bits)


def bfp_round_trip(
    t: np.ndarray,
    m: int,
    g: int = DEFAULT_GROUP_SIZE,
    mode: RoundingMode = TRUNCATE,
    rng: int | np.random.Generator | None = None,
    axis: int = -1,
) -> np.ndarray:
    """``BFP(X, m)``: quantize then dequantize, returning an FP32 array."""
    return quantize_tensor(t, m, g, mode, rng, axis).dequantize()


# ---------------------------------------------------------------------------
# Exponent spread


OVERFLOW_BUCKET = 64


def exponent_spread_histogram(t: np.ndarray, g: int = DEFAULT_GROUP_SIZE, axis: int = -1) -> np.ndarray:
    """Counts of ``shared_exponent - element_exponent`` over all elements.

    Buckets 0..63 hold exact differences; bucket 64 collects larger gaps and
    zero elements (whose bits are always shifted out entirely).  Padding is
    not counted, so the counts sum to ``t.size``.
    """
    x = np.asarray(t, dtype=np.float32)
    if x.ndim == 0:
        x = x.reshape(1)
    axis = axis % x.ndim
    n = x.shape[axis]
    _, exponent, significand = split_fp32(_group_view(x, axis, g))
    shared = exponent.max(axis=-1, keepdims=True)
    diff = np.where(significand == 0, OVERFLOW_BUCKET, np.minimum(shared - exponent, OVERFLOW_BUCKET))
    valid = (np.arange(diff.shape[1] * g).reshape(diff.shape[1], g) < n)[None, :, :]
    diff = diff[np.broadcast_to(valid, diff.shape)]
    return np.bincount(diff.ravel(), minlength=OVERFLOW_BUCKET + 1)


def histogram_csv(hist: np.ndarray) -> str:
    lines = ["diff,count"]
    for diff, count in enumerate(hist):
        label = str(diff) if diff < OVERFLOW_BUCKET else f">={OVERFLOW_BUCKET}"
        lines.append(f"{label},{int(count)}")
    return "\n".join(lines) + "\n"
