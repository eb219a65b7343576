"""Routes every layer matmul through the systolic simulator.

A layer whose setting is ``None`` runs in plain FP32 (numpy) and is charged
at the FP32 pass-equivalent rate without any converter work.
"""

from __future__ import annotations

import numpy as np

from ..numerics import NEAREST, BfpTensor, RoundingMode, quantize_tensor
from ..precision import PrecisionSetting
from ..systolic import ArrayConfig, CostModelParams, CostReport, JobGeometry, Mode, SystolicArray, SystolicJob, geometry_cost


class MatmulEngine:
    def __init__(
        self,
        rng: np.random.Generator,
        grad_rounding: RoundingMode,
        g: int = 16,
        e_bits: int = 3,
        cfg: ArrayConfig = ArrayConfig(),
        params: CostModelParams = CostModelParams(),
        validate: bool = False,
    ) -> None:
        self.rng = rng
        self.grad_rounding = grad_rounding
        self.g = g
        self.e_bits = e_bits
        self.array = SystolicArray(cfg, params, keep_tiles=False)
        self.cost = CostReport()
        self.validate = validate
        self.conversions = 0
        self.accounting = True

    # -- helpers ----------------------------------------------------------

    def _q(self, x: np.ndarray, m: int, axis: int, grad: bool) -> BfpTensor:
        mode = self.grad_rounding if grad else NEAREST
        t = quantize_tensor(x, m, self.g, mode, self.rng if mode.is_stochastic else None, axis, self.e_bits)
        if self.validate:
            check_tensor(t)
        self.conversions += 1
        return t

    def _run(self, job: SystolicJob) -> np.ndarray:
        out, report = self.array.run(job)
        if self.accounting:
            self.cost = self.cost + report
        return out

    def _fp32(self, mode: Mode, left_rows: int, right_rows: int, k: int, out: np.ndarray) -> np.ndarray:
        if self.accounting:
            geo = JobGeometry(mode, left_rows, right_rows, -(-k // self.g), self.g, None, None, self.e_bits)
            self.cost = self.cost + geometry_cost(geo, self.array.cfg, self.array.params, keep_tiles=False)
        return out

    # -- the three dataflows ----------------------------------------------

    def forward(self, a: np.ndarray, w: np.ndarray, s: PrecisionSetting | None) -> np.ndarray:
        """``a (M,K) @ w (K,N)``."""
        if s is None:
            return self._fp32(Mode.FORWARD, a.shape[0], w.shape[1], a.shape[1], a @ w)
        job = SystolicJob.forward(self._q(a, s.m_A, 1, False), self._q(w, s.m_W, 0, False))
        return self._run(job)

    def grad_a(self, grad_out: np.ndarray, w: np.ndarray, s: PrecisionSetting | None) -> np.ndarray:
        """``grad_out (M,N) @ w.T`` without reorienting ``w``."""
        if s is None:
            return self._fp32(Mode.GRAD_A, grad_out.shape[0], w.shape[0], w.shape[1], grad_out @ w.T)
        job = SystolicJob.grad_a(self._q(grad_out, s.m_G, 1, True), self._q(w, s.m_W, 1, False))
        return self._run(job)

    def grad_w(self, a: np.ndarray, grad_out: np.ndarray, s: PrecisionSetting | None) -> np.ndarray:
        """``a.T @ grad_out``."""
        if s is None:
            return self._fp32(Mode.GRAD_W, a.shape[1], grad_out.shape[1], a.shape[0], a.T @ grad_out)
        job = SystolicJob.grad_w(self._q(a, s.m_A, 0, False), self._q(grad_out, s.m_G, 0, True))
        return self._run(job)


def check_tensor(t: BfpTensor) -> None:
    """Assert the structural invariants of a quantized tensor."""
    n = t.shape[t.axis]
    rows = int(np.prod(t.shape)) // n if n else 0
    per_row = -(-n // t.g)
    assert t.shared_exponents.shape == (rows, per_row)
    assert t.mantissas.shape == (rows, per_row, t.g)
    assert np.all((t.mantissas >= 0) & (t.mantissas < (1 << t.m)))
    assert np.all(np.isin(t.signs, (-1, 1)))
    pad = t.mantissas.reshape(rows, -1)[:, n:]
    assert not np.any(pad)
