"""Bit-exact model of the BFP multiply-accumulate cell.

One group-pair dot product is an exact integer sum of sign-magnitude mantissa
products (the adder tree), scaled by the sum of the two shared exponents and
rounded once to FP32 (the FP generator).  Results of successive group pairs
are folded into an FP32 accumulator in group-index order.

Variable precision is handled by slicing mantissas into 2-bit chunks and
running one pass per chunk pair; the exact integer partials of all passes are
combined before the single FP32 rounding, so the chunked result is
bit-identical to the one-shot product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GroupSizeMismatch, OddMantissaWidth
from .numerics import ZERO, BfpGroup, FpScalar, decompose_fp, fp32_ftz

CHUNK_BITS = 2


def pass_count(m_x: int, m_y: int) -> int:
    """Number of 2-bit chunk passes for a dot product at widths ``(m_x, m_y)``."""
    for m in (m_x, m_y):
        if m < CHUNK_BITS or m % CHUNK_BITS:
            raise OddMantissaWidth(f"mantissa width must be a positive even number, got {m}")
    return (m_x // CHUNK_BITS) * (m_y // CHUNK_BITS)


@dataclass(frozen=True)
class ChunkedMantissaPlane:
    """The ``chunk_index``-th 2-bit slice (high-order first) of a group."""

    group_id: int
    chunk_index: int
    chunks: tuple[int, ...]
    signs: tuple[int, ...]
    effective_exponent: int

    def as_group(self) -> BfpGroup:
        return BfpGroup(self.effective_exponent, CHUNK_BITS, self.signs, self.chunks)


def chunk(grp: BfpGroup, group_id: int = 0) -> list[ChunkedMantissaPlane]:
    n = pass_count(grp.m, CHUNK_BITS)
    planes = []
    for k in range(n):
        shift = grp.m - CHUNK_BITS * (k + 1)
        planes.append(
            ChunkedMantissaPlane(
                group_id,
                k,
                tuple((q >> shift) & 0b11 for q in grp.mantissas),
                grp.signs,
                grp.shared_exponent - CHUNK_BITS * k,
            )
        )
    return planes


def reconstruct(planes: list[ChunkedMantissaPlane]) -> tuple[int, ...]:
    """Concatenate chunk planes back into full mantissas."""
    out = [0] * len(planes[0].chunks)
    for plane in sorted(planes, key=lambda p: p.chunk_index):
        out = [(q << CHUNK_BITS) | c for q, c in zip(out, plane.chunks)]
    return tuple(out)


def _check_pair(x: BfpGroup, y: BfpGroup) -> None:
    if x.g != y.g:
        raise GroupSizeMismatch(f"group sizes differ: {x.g} vs {y.g}")


def _integer_dot(x: BfpGroup, y: BfpGroup) -> int:
    return sum(a * b for a, b in zip(x.signed_mantissas(), y.signed_mantissas()))


def _normalize(total: int, lsb_exponent: int) -> FpScalar:
    if total == 0:
        return ZERO
    value = fp32_ftz(np.ldexp(np.float64(total), lsb_exponent))
    return decompose_fp(float(value))


def bfp_dot(x: BfpGroup, y: BfpGroup) -> FpScalar:
    _check_pair(x, y)
    lsb = x.shared_exponent + y.shared_exponent - (x.m - 1) - (y.m - 1)
    return _normalize(_integer_dot(x, y), lsb)


@dataclass(frozen=True)
class PassRecord:
    index: int
    chunk_x: int
    chunk_y: int
    partial: int
    partial_exponent: int
    buffer: int


def chunked_dot(x: BfpGroup, y: BfpGroup, trace: list[PassRecord] | None = None) -> FpScalar:
    """Dot product executed one chunk pair per pass.

    If ``trace`` is given, one :class:`PassRecord` per executed pass is
    appended to it.
    """
    _check_pair(x, y)
    planes_x, planes_y = chunk(x), chunk(y)
    lsb = x.shared_exponent + y.shared_exponent - (x.m - 1) - (y.m - 1)
    buffer = 0
    n = 0
    for px in planes_x:
        for py in planes_y:
            gx, gy = px.as_group(), py.as_group()
            partial = _integer_dot(gx, gy)
            exp = gx.shared_exponent + gy.shared_exponent - 2 * (CHUNK_BITS - 1)
            buffer += partial << (exp - lsb)
            if trace is not None:
                trace.append(PassRecord(n, px.chunk_index, py.chunk_index, partial, exp, buffer))
            n += 1
    return _normalize(buffer, lsb)


def trace_csv(trace: list[PassRecord]) -> str:
    lines = ["pass,chunk_x,chunk_y,partial,partial_exponent,buffer"]
    lines += [
        f"{r.index},{r.chunk_x},{r.chunk_y},{r.partial},{r.partial_exponent},{r.buffer}" for r in trace
    ]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FpAccumulator:
    value: np.float32 = np.float32(0.0)


def accumulate(acc: FpAccumulator, partial: FpScalar | float) -> FpAccumulator:
    return FpAccumulator(np.float32(acc.value + np.float32(float(partial))))


def dot_groups(xs: list[BfpGroup], ys: list[BfpGroup], chunked: bool = True) -> np.float32:
    """Reference fold: group-pair dots accumulated in group-index order."""
    if len(xs) != len(ys):
        raise GroupSizeMismatch(f"group counts differ: {len(xs)} vs {len(ys)}")
    dot = chunked_dot if chunked else bfp_dot
    acc = FpAccumulator()
    for x, y in zip(xs, ys):
        acc = accumulate(acc, dot(x, y))
    return acc.value


# ---------------------------------------------------------------------------
# Vectorised kernel used by the systolic simulator


def _planes(signed: np.ndarray, m: int) -> list[np.ndarray]:
    mag = np.abs(signed)
    sign = np.sign(signed)
    n = m // CHUNK_BITS
    return [sign * ((mag >> (m - CHUNK_BITS * (k + 1))) & 0b11) for k in range(n)]


def group_pair_partials(
    x_signed: np.ndarray,
    x_exp: np.ndarray,
    m_x: int,
    y_signed: np.ndarray,
    y_exp: np.ndarray,
    m_y: int,
) -> tuple[np.ndarray, int]:
    """FP32 results of every group-pair dot product, executed chunk-pass by chunk-pass.

    ``x_signed`` is ``(P, G, g)`` signed mantissas with shared exponents
    ``x_exp`` of shape ``(P, G)``; likewise ``y`` with ``Q`` rows.  Returns
    partials of shape ``(G, P, Q)`` and the number of passes executed.
    """
    if x_signed.shape[1:] != y_signed.shape[1:]:
        raise GroupSizeMismatch(f"group layouts differ: {x_signed.shape[1:]} vs {y_signed.shape[1:]}")
    nx, ny = m_x // CHUNK_BITS, m_y // CHUNK_BITS
    pass_count(m_x, m_y)
    # (G, P, g) @ (G, g, Q): every partial sum is an integer below 2**53, so
    # float64 matmul is exact.
    xs = [np.ascontiguousarray(p.transpose(1, 0, 2), dtype=np.float64) for p in _planes(x_signed, m_x)]
    ys = [np.ascontiguousarray(p.transpose(1, 2, 0), dtype=np.float64) for p in _planes(y_signed, m_y)]
    total = np.zeros((x_signed.shape[1], x_signed.shape[0], y_signed.shape[0]))
    passes = 0
    for kx in range(nx):
        for ky in range(ny):
            weight = float(4 ** ((nx - 1 - kx) + (ny - 1 - ky)))
            total += weight * (xs[kx] @ ys[ky])
            passes += 1
    lsb = x_exp.T[:, :, None] + y_exp.T[:, None, :] - (m_x - 1) - (m_y - 1)
    lsb = np.clip(lsb, -4000, 4000).astype(np.int32)
    return fp32_ftz(np.ldexp(total, lsb)), passes


def fold_groups(partials: np.ndarray, init: np.ndarray | None = None) -> np.ndarray:
    """FP32 accumulation over the leading (group) axis in index order."""
    if init is None:
        acc = np.zeros(partials.shape[1:], dtype=np.float32)
    else:
        acc = np.array(init, dtype=np.float32)
    for part in partials:
        acc = acc + part
    return acc
