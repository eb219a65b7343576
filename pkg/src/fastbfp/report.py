"""Aggregations of precision traces for heatmaps."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .precision import HIGH_M, PrecisionTrace


@dataclass(frozen=True)
class HeatmapCell:
    bucket: int
    first_iteration: int
    last_iteration: int
    layer: int
    setting: str
    frac_high: float


def bucket_of(iteration: int, total_iterations: int, buckets: int) -> int:
    """0-based equal-width bucket of a 1-based iteration."""
    return min(buckets - 1, (iteration - 1) * buckets // total_iterations)


def high_fraction(trace: PrecisionTrace, total_iterations: int, n_layers: int, buckets: int = 5) -> np.ndarray:
    """``(buckets, n_layers)`` share of decisions that chose the high width.

    Cells with no decisions are NaN.
    """
    hits = np.zeros((buckets, n_layers))
    seen = np.zeros((buckets, n_layers))
    for row in trace.rows:
        b = bucket_of(row.iteration, total_iterations, buckets)
        hits[b, row.layer - 1] += row.chosen_m == HIGH_M
        seen[b, row.layer - 1] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return hits / seen


def heatmap(trace: PrecisionTrace, total_iterations: int, n_layers: int, buckets: int = 5) -> list[HeatmapCell]:
    """One cell per (bucket, layer) with the most frequent (W,A,G) setting."""
    frac = high_fraction(trace, total_iterations, n_layers, buckets)
    modes: dict[tuple[int, int], Counter] = {}
    for (it, layer), s in trace.settings().items():
        modes.setdefault((bucket_of(it, total_iterations, buckets), layer), Counter())[str(s)] += 1
    cells = []
    for b in range(buckets):
        first = b * total_iterations // buckets + 1
        last = (b + 1) * total_iterations // buckets
        for layer in range(1, n_layers + 1):
            counts = modes.get((b, layer))
            # ties broken lexicographically so the output is deterministic
            setting = min(counts, key=lambda k: (-counts[k], k)) if counts else ""
            cells.append(HeatmapCell(b + 1, first, last, layer, setting, float(frac[b, layer - 1])))
    return cells


def heatmap_csv(cells: list[HeatmapCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket", "first_iteration", "last_iteration", "layer", "setting", "frac_m4"])
    for c in cells:
        w.writerow([c.bucket, c.first_iteration, c.last_iteration, c.layer, c.setting, repr(c.frac_high)])
    return buf.getvalue()


def is_monotone(frac: np.ndarray) -> bool:
    """Non-decreasing along both buckets (rows) and layers (columns)."""
    return bool(np.all(np.diff(frac, axis=0) >= 0) and np.all(np.diff(frac, axis=1) >= 0))
