"""Adaptive mantissa-width selection.

For each layer and iteration the weights, activations and gradients each get
2 or 4 mantissa bits, depending on how much 4 bits would improve on 2 bits
relative to a threshold that falls linearly with iteration and layer depth.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import NonFiniteInput, OutOfRangeIndex
from .numerics import DEFAULT_GROUP_SIZE, TRUNCATE, bfp_round_trip

LOW_M = 2
HIGH_M = 4
TENSOR_KINDS = ("W", "A", "G")


@dataclass(frozen=True)
class ThresholdParams:
    total_iterations: int
    total_layers: int
    alpha: float = 0.6
    beta: float = 0.3

    def __post_init__(self) -> None:
        if self.total_iterations < 1 or self.total_layers < 1:
            raise ValueError("total_iterations and total_layers must be >= 1")


@dataclass(frozen=True)
class PrecisionSetting:
    m_W: int
    m_A: int
    m_G: int

    def __post_init__(self) -> None:
        for m in (self.m_W, self.m_A, self.m_G):
            if m not in (LOW_M, HIGH_M):
                raise ValueError(f"mantissa width must be {LOW_M} or {HIGH_M}, got {m}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.m_W, self.m_A, self.m_G)

    def __str__(self) -> str:
        return "({},{},{})".format(*self.as_tuple())

    @classmethod
    def all(cls) -> list[PrecisionSetting]:
        return [cls(w, a, g) for w in (LOW_M, HIGH_M) for a in (LOW_M, HIGH_M) for g in (LOW_M, HIGH_M)]


def relative_improvement(x: np.ndarray, g: int = DEFAULT_GROUP_SIZE, axis: int = -1) -> float:
    """``sum|BFP(x,4) - BFP(x,2)| / sum|BFP(x,2)|`` under truncation.

    A zero denominator gives 0 when the numerator is zero too and ``inf``
    otherwise, so the latter always selects the wide format.
    """
    x = np.asarray(x, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("NaN or infinity in input")
    lo = bfp_round_trip(x, LOW_M, g, TRUNCATE, axis=axis).astype(np.float64)
    hi = bfp_round_trip(x, HIGH_M, g, TRUNCATE, axis=axis).astype(np.float64)
    num = float(np.abs(hi - lo).sum())
    den = float(np.abs(lo).sum())
    if den == 0.0:
        return math.inf if num > 0 else 0.0
    return num / den


def threshold(l: int, i: int, p: ThresholdParams) -> float:
    """Threshold for layer ``l`` (1-based) at iteration ``i`` (1-based)."""
    if not 1 <= l <= p.total_layers:
        raise OutOfRangeIndex(f"layer {l} outside [1, {p.total_layers}]")
    if not 1 <= i <= p.total_iterations:
        raise OutOfRangeIndex(f"iteration {i} outside [1, {p.total_iterations}]")
    return p.alpha - p.beta * i / p.total_iterations - p.beta * l / p.total_layers


def decide(r: float, eps: float) -> int:
    return LOW_M if r < eps else HIGH_M


def select_precision(
    x: np.ndarray, l: int, i: int, p: ThresholdParams, g: int = DEFAULT_GROUP_SIZE, axis: int = -1
) -> int:
    return decide(relative_improvement(x, g, axis), threshold(l, i, p))


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    layer: int
    tensor_kind: str
    r: float
    epsilon: float
    chosen_m: int


@dataclass
class PrecisionTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def sorted_rows(self) -> list[TraceRow]:
        order = {k: n for n, k in enumerate(TENSOR_KINDS)}
        return sorted(self.rows, key=lambda r: (r.iteration, r.layer, order.get(r.tensor_kind, 99)))

    def settings(self) -> dict[tuple[int, int], PrecisionSetting]:
        """Chosen setting per evaluated ``(iteration, layer)``."""
        by_key: dict[tuple[int, int], dict[str, int]] = {}
        for row in self.rows:
            by_key.setdefault((row.iteration, row.layer), {})[row.tensor_kind] = row.chosen_m
        return {
            key: PrecisionSetting(ms["W"], ms["A"], ms["G"])
            for key, ms in by_key.items()
            if set(ms) >= set(TENSOR_KINDS)
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "layer", "tensor_kind", "r", "epsilon", "chosen_m"])
        for row in self.sorted_rows():
            w.writerow([row.iteration, row.layer, row.tensor_kind, repr(row.r), repr(row.epsilon), row.chosen_m])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> PrecisionTrace:
        rows = [
            TraceRow(int(d["iteration"]), int(d["layer"]), d["tensor_kind"], float(d["r"]), float(d["epsilon"]), int(d["chosen_m"]))
            for d in csv.DictReader(io.StringIO(text))
        ]
        return cls(rows)


def record_trace(
    trace: PrecisionTrace,
    i: int,
    l: int,
    settings: PrecisionSetting,
    r_values: Iterable[float],
    epsilon: float = math.nan,
) -> PrecisionTrace:
    """Append the W, A, G decisions for ``(i, l)``; returns the same trace."""
    for kind, m, r in zip(TENSOR_KINDS, settings.as_tuple(), r_values):
        trace.rows.append(TraceRow(i, l, kind, float(r), float(epsilon), m))
    return trace
