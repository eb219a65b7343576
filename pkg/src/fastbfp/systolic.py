"""Functional and cost simulation of the 2D fMAC systolic array.

Each cell performs one group-pair dot product per pass.  The three dataflows
used in training share one kernel; what differs is which operand is held in
the cells and which array dimension carries the reduction:

* ``forward``: ``O = A @ W`` with A ``(M, K)`` grouped on axis 1 and W
  ``(K, N)`` grouped on axis 0.  W is held in the cells.
* ``grad_a``: ``dA = dO @ W.T`` with dO ``(M, N)`` grouped on axis 1 and W
  grouped on axis 1.  W is held in the cells.
* ``grad_w``: ``dW = A.T @ dO`` with A grouped on axis 0 and dO ``(M, N)``
  grouped on axis 0.  dW accumulates in the cells.

``W`` keeps its ``(K, N)`` orientation in both weight-stationary modes; the
backward modes only change where inputs enter and results leave, so no
operand is ever copied into a transposed layout.

Cycle model per tile: ``fill = rows_used + cols_used`` (input skew),
``stream = stream_length * passes_per_dp``, ``drain = cols_used``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .errors import ShapeMismatch
from .fmac import fold_groups, group_pair_partials, pass_count
from .numerics import BfpTensor
from .storage import storage_bits

FP32_BITS = 32
CONVERTER_OUTPUT_M = 4


class Mode(str, Enum):
    FORWARD = "forward"
    GRAD_A = "grad_a"
    GRAD_W = "grad_w"


# (left grouping axis, right grouping axis) for each mode
OPERAND_AXES = {
    Mode.FORWARD: (1, 0),
    Mode.GRAD_A: (1, 1),
    Mode.GRAD_W: (0, 0),
}


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 256
    cols: int = 64
    g: int = 16
    clock_hz: float = 500e6

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError("array needs at least one row and one column")


@dataclass(frozen=True)
class CostModelParams:
    """Energy constants, in joules.

    Defaults are calibrated estimates from 45nm power figures:
    fMAC power 0.885 mW per cell at 500 MHz gives the per-pass energy; the
    1.77 W converter budget is spread over one converter per array column;
    the 3.37 W memory budget is spread over 3 SRAMs x 128 banks x 32 bits per
    cycle.
    """

    fmac_pass_energy: float = 0.885e-3 / 500e6
    converter_group_energy: float = 1.77 / (500e6 * 64)
    sram_bit_energy: float = 3.37 / (500e6 * 3 * 128 * 32)
    fill_per_row: float = 1.0
    fill_per_col: float = 1.0
    drain_per_col: float = 1.0
    fp32_passes_per_dp: int = 144

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_json(cls, text: str) -> CostModelParams:
        return cls(**json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass(frozen=True)
class JobGeometry:
    """Everything the cost model needs to know about a job.

    ``left_rows``/``right_rows`` are the non-reduced extents of the two
    operands (rows and columns of the result) and ``groups`` the number of
    groups along the reduction.  ``m_left``/``m_right`` of ``None`` mark an
    FP32 operand that bypasses BFP conversion.
    """

    mode: Mode
    left_rows: int
    right_rows: int
    groups: int
    g: int
    m_left: int | None
    m_right: int | None
    e_bits: int = 3

    @property
    def is_bfp(self) -> bool:
        return self.m_left is not None and self.m_right is not None

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.left_rows, self.right_rows)


@dataclass(frozen=True)
class SystolicJob:
    mode: Mode
    left: BfpTensor
    right: BfpTensor

    def __post_init__(self) -> None:
        mode = Mode(self.mode)
        object.__setattr__(self, "mode", mode)
        want_l, want_r = OPERAND_AXES[mode]
        for name, t, want in (("left", self.left, want_l), ("right", self.right, want_r)):
            if len(t.shape) != 2:
                raise ShapeMismatch(f"{mode.value}: {name} operand must be 2-D, got shape {t.shape}")
            if t.axis != want:
                raise ShapeMismatch(f"{mode.value}: {name} operand must be grouped along axis {want}, got {t.axis}")
        if self.left.g != self.right.g:
            raise ShapeMismatch(f"group sizes differ: {self.left.g} vs {self.right.g}")
        if self.left.shape[want_l] != self.right.shape[want_r]:
            raise ShapeMismatch(
                f"{mode.value}: reduction lengths differ: {self.left.shape} vs {self.right.shape}"
            )

    @classmethod
    def forward(cls, a: BfpTensor, w: BfpTensor) -> SystolicJob:
        return cls(Mode.FORWARD, a, w)

    @classmethod
    def grad_a(cls, grad_out: BfpTensor, w: BfpTensor) -> SystolicJob:
        return cls(Mode.GRAD_A, grad_out, w)

    @classmethod
    def grad_w(cls, a: BfpTensor, grad_out: BfpTensor) -> SystolicJob:
        return cls(Mode.GRAD_W, a, grad_out)

    def geometry(self) -> JobGeometry:
        return JobGeometry(
            self.mode,
            self.left.shared_exponents.shape[0],
            self.right.shared_exponents.shape[0],
            self.left.groups_per_row,
            self.left.g,
            self.left.m,
            self.right.m,
            self.left.e_bits,
        )


@dataclass(frozen=True)
class Tile:
    index: int
    left: tuple[int, int]
    right: tuple[int, int]
    groups: tuple[int, int]
    dp_ops: int
    passes: int
    fill: int
    stream: int
    drain: int
    bits_in: int

    @property
    def cycles(self) -> int:
        return self.fill + self.stream + self.drain


@dataclass
class CostReport:
    dp_ops: int = 0
    passes: int = 0
    cycles: int = 0
    energy: float = 0.0
    converter_groups: int = 0
    bits_moved: int = 0
    tiles: list[dict] = field(default_factory=list)

    def __add__(self, other: CostReport) -> CostReport:
        return CostReport(
            self.dp_ops + other.dp_ops,
            self.passes + other.passes,
            self.cycles + other.cycles,
            self.energy + other.energy,
            self.converter_groups + other.converter_groups,
            self.bits_moved + other.bits_moved,
            self.tiles + other.tiles,
        )

    def totals(self) -> dict:
        d = asdict(self)
        d.pop("tiles")
        return d

    def to_json(self) -> str:
        return json.dumps({"totals": self.totals(), "tiles": self.tiles}, indent=2)


# ---------------------------------------------------------------------------
# Scheduling


def _ranges(n: int, step: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + step, n)) for lo in range(0, n, step)]


def _group_bits(m: int | None, geo: JobGeometry) -> int:
    if m is None:
        return FP32_BITS * geo.g
    return storage_bits(geo.e_bits, geo.g, m)


def tile_schedule(
    job: SystolicJob | JobGeometry,
    cfg: ArrayConfig = ArrayConfig(),
    params: CostModelParams = CostModelParams(),
) -> tuple[list[Tile], int]:
    """Split a job into array-sized tiles; returns the tiles and total cycles."""
    geo = job.geometry() if isinstance(job, SystolicJob) else job
    if geo.is_bfp:
        per_dp = pass_count(geo.m_left, geo.m_right)
    else:
        per_dp = params.fp32_passes_per_dp
    bits_l = _group_bits(geo.m_left, geo)
    bits_r = _group_bits(geo.m_right, geo)

    if geo.mode is Mode.FORWARD:
        # rows hold reduction groups, cols hold W columns, A streams
        row_ranges = _ranges(geo.groups, cfg.rows)
        col_ranges = _ranges(geo.right_rows, cfg.cols)
        spans = [((0, geo.left_rows), c, r) for c in col_ranges for r in row_ranges]
    elif geo.mode is Mode.GRAD_A:
        # rows hold W rows (K), cols hold reduction groups, dO streams
        row_ranges = _ranges(geo.right_rows, cfg.rows)
        col_ranges = _ranges(geo.groups, cfg.cols)
        spans = [((0, geo.left_rows), r, c) for r in row_ranges for c in col_ranges]
    else:
        # cells hold dW(k, n); every reduction group streams through
        row_ranges = _ranges(geo.left_rows, cfg.rows)
        col_ranges = _ranges(geo.right_rows, cfg.cols)
        spans = [(r, c, (0, geo.groups)) for r in row_ranges for c in col_ranges]

    tiles = []
    total = 0
    for idx, (lr, rr, gr) in enumerate(spans):
        n_left, n_right, n_groups = lr[1] - lr[0], rr[1] - rr[0], gr[1] - gr[0]
        dp_ops = n_left * n_right * n_groups
        if dp_ops == 0:
            continue
        if geo.mode is Mode.FORWARD:
            used_rows, used_cols, stream_len = n_groups, n_right, n_left
        elif geo.mode is Mode.GRAD_A:
            used_rows, used_cols, stream_len = n_right, n_groups, n_left
        else:
            used_rows, used_cols, stream_len = n_left, n_right, n_groups
        fill = math.ceil(params.fill_per_row * used_rows + params.fill_per_col * used_cols)
        drain = math.ceil(params.drain_per_col * used_cols)
        stream = stream_len * per_dp
        # every tile reads its slice of both operands once
        bits_in = n_left * n_groups * bits_l + n_right * n_groups * bits_r
        tile = Tile(idx, lr, rr, gr, dp_ops, dp_ops * per_dp, fill, stream, drain, bits_in)
        tiles.append(tile)
        total += tile.cycles
    return tiles, total


def estimate_cost(
    schedule: tuple[list[Tile], int] | list[Tile],
    params: CostModelParams = CostModelParams(),
    geometry: JobGeometry | None = None,
) -> CostReport:
    """Energy and totals for a schedule.

    ``energy = passes * fmac_pass_energy + converter_groups *
    converter_group_energy + bits_moved * sram_bit_energy``.  Converter
    invocations and output write-back are charged only when ``geometry``
    describes a BFP job: each output row is converted into 4-bit groups.
    """
    tiles = schedule[0] if isinstance(schedule, tuple) else schedule
    report = CostReport()
    for t in tiles:
        report.dp_ops += t.dp_ops
        report.passes += t.passes
        report.cycles += t.cycles
        report.bits_moved += t.bits_in
        report.tiles.append(asdict(t) | {"cycles": t.cycles})
    if geometry is not None and geometry.is_bfp and report.dp_ops:
        out_rows, out_cols = geometry.out_shape
        report.converter_groups = out_rows * math.ceil(out_cols / geometry.g)
        report.bits_moved += report.converter_groups * storage_bits(geometry.e_bits, geometry.g, CONVERTER_OUTPUT_M)
    report.energy = (
        report.passes * params.fmac_pass_energy
        + report.converter_groups * params.converter_group_energy
        + report.bits_moved * params.sram_bit_energy
    )
    return report


def geometry_cost(
    geo: JobGeometry,
    cfg: ArrayConfig = ArrayConfig(),
    params: CostModelParams = CostModelParams(),
    keep_tiles: bool = True,
) -> CostReport:
    report = estimate_cost(tile_schedule(geo, cfg, params), params, geo)
    if not keep_tiles:
        report.tiles = []
    return report


# ---------------------------------------------------------------------------
# Functional simulation


class SystolicArray:
    """A configured array that runs jobs and keeps instrumentation counters.

    ``transpose_ops`` counts explicit reorientations of a stored operand.  No
    dataflow path performs one; the counter exists so tests can assert it.
    """

    def __init__(
        self,
        cfg: ArrayConfig = ArrayConfig(),
        params: CostModelParams = CostModelParams(),
        keep_tiles: bool = True,
    ) -> None:
        self.cfg = cfg
        self.params = params
        self.keep_tiles = keep_tiles
        self.transpose_ops = 0
        self.passes_executed = 0
        self.jobs_run = 0

    def run(self, job: SystolicJob) -> tuple[np.ndarray, CostReport]:
        geo = job.geometry()
        tiles, _ = tile_schedule(geo, self.cfg, self.params)
        left = job.left.signed_mantissas()
        right = job.right.signed_mantissas()
        lexp, rexp = job.left.shared_exponents, job.right.shared_exponents
        out = np.zeros(geo.out_shape, dtype=np.float32)
        # Tiles are visited with the reduction ranges of each output block in
        # ascending order, so the FP32 fold runs in global group order.
        for t in sorted(tiles, key=lambda t: (t.left, t.right, t.groups)):
            (l0, l1), (r0, r1), (g0, g1) = t.left, t.right, t.groups
            partials, passes = group_pair_partials(
                left[l0:l1, g0:g1], lexp[l0:l1, g0:g1], job.left.m,
                right[r0:r1, g0:g1], rexp[r0:r1, g0:g1], job.right.m,
            )
            assert passes == pass_count(job.left.m, job.right.m)
            self.passes_executed += passes * (l1 - l0) * (r1 - r0) * (g1 - g0)
            out[l0:l1, r0:r1] = fold_groups(partials, out[l0:l1, r0:r1])
        self.jobs_run += 1
        report = estimate_cost((tiles, 0), self.params, geo)
        if not self.keep_tiles:
            report.tiles = []
        return out, report

    def run_forward(self, job: SystolicJob) -> tuple[np.ndarray, CostReport]:
        _expect(job, Mode.FORWARD)
        return self.run(job)

    def run_grad_a(self, job: SystolicJob) -> tuple[np.ndarray, CostReport]:
        _expect(job, Mode.GRAD_A)
        return self.run(job)

    def run_grad_w(self, job: SystolicJob, base_weights: np.ndarray | None = None) -> tuple[np.ndarray, CostReport]:
        """Weight gradient; with ``base_weights`` the drained sum ``W + dW`` is returned."""
        _expect(job, Mode.GRAD_W)
        grad, report = self.run(job)
        if base_weights is not None:
            base = np.asarray(base_weights, dtype=np.float32)
            if base.shape != grad.shape:
                raise ShapeMismatch(f"weights {base.shape} vs gradient {grad.shape}")
            grad = base + grad
        return grad, report


def _expect(job: SystolicJob, mode: Mode) -> None:
    if job.mode is not mode:
        raise ShapeMismatch(f"expected a {mode.value} job, got {job.mode.value}")


_DEFAULT = SystolicArray()


def run_forward(job: SystolicJob) -> tuple[np.ndarray, CostReport]:
    return _DEFAULT.run_forward(job)


def run_grad_a(job: SystolicJob) -> tuple[np.ndarray, CostReport]:
    return _DEFAULT.run_grad_a(job)


def run_grad_w(job: SystolicJob, base_weights: np.ndarray | None = None) -> tuple[np.ndarray, CostReport]:
    return _DEFAULT.run_grad_w(job, base_weights)
