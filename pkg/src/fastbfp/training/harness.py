"""Desk-scale training runs with scheduled BFP precision.

Every layer matmul of a training iteration (forward, activation gradient,
weight gradient) goes through :class:`MatmulEngine`.  Weights and
activations are converted with round-to-nearest, gradients with the
configured gradient rounding (stochastic by default).  The update is plain
SGD in descent form, ``W <- W - lr * dE/dW``, which is the same step as
adding ``lr`` times the negated gradient.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import Divergence
from ..numerics import NEAREST, RoundingMode, make_rng, quantize_tensor
from ..precision import (
    HIGH_M,
    LOW_M,
    PrecisionSetting,
    PrecisionTrace,
    ThresholdParams,
    decide,
    record_trace,
    relative_improvement,
    threshold,
)
from ..systolic import ArrayConfig, CostModelParams
from . import data as datasets
from .engine import MatmulEngine
from .model import Model, mlp, small_cnn, softmax_cross_entropy

SCHEDULES = (
    "fp32",
    "fixed",
    "temporal-low-to-high",
    "temporal-high-to-low",
    "layerwise-low-to-high",
    "layerwise-high-to-low",
    "fast-adaptive",
)
WEIGHT_STORAGE = ("fp32-master", "bfp-stored")


@dataclass(frozen=True)
class TrainConfig:
    schedule: str = "fp32"
    iterations: int = 600
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0
    dataset: str = "digits"
    model: str = "mlp"
    hidden: int = 64
    depth: int = 4
    fixed_m: int = HIGH_M
    low_m: int = LOW_M
    alpha: float = 0.6
    beta: float = 0.3
    eval_every: int = 1
    weight_storage: str = "fp32-master"
    grad_rounding: str = "stochastic"
    noise_bits: int = 3
    g: int = 16
    e_bits: int = 3
    val_every: int = 25
    name: str = ""

    def __post_init__(self) -> None:
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {', '.join(SCHEDULES)}")
        if self.weight_storage not in WEIGHT_STORAGE:
            raise ValueError(f"unknown weight storage {self.weight_storage!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1 or self.batch_size < 1 or self.eval_every < 1 or self.val_every < 1:
            raise ValueError("iterations, batch_size, eval_every and val_every must be >= 1")
        RoundingMode.parse(self.grad_rounding, self.noise_bits)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.schedule == "fixed":
            return f"fixed-m{self.fixed_m}"
        return self.schedule

    def rounding(self) -> RoundingMode:
        return RoundingMode.parse(self.grad_rounding, self.noise_bits)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class RunRecord:
    config: dict
    losses: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)
    cum_cycles: list[int] = field(default_factory=list)
    cum_energy: list[float] = field(default_factory=list)
    cum_passes: list[int] = field(default_factory=list)
    trace: PrecisionTrace = field(default_factory=PrecisionTrace)
    cost: dict = field(default_factory=dict)
    conversions: int = 0
    diverged: bool = False

    @property
    def label(self) -> str:
        return TrainConfig.from_dict(self.config).label

    @property
    def final_accuracy(self) -> float:
        return self.val[-1][1] if self.val else math.nan

    @property
    def total_passes(self) -> int:
        return self.cum_passes[-1] if self.cum_passes else 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "label": self.label,
                "diverged": self.diverged,
                "final_accuracy": self.final_accuracy,
                "cost": self.cost,
                "conversions": self.conversions,
                "losses": self.losses,
                "val": [list(v) for v in self.val],
                "cum_cycles": self.cum_cycles,
                "cum_energy": self.cum_energy,
                "cum_passes": self.cum_passes,
                "trace": self.trace.to_csv(),
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> RunRecord:
        d = json.loads(text)
        return cls(
            config=d["config"],
            losses=d["losses"],
            val=[(int(i), float(a)) for i, a in d["val"]],
            cum_cycles=d["cum_cycles"],
            cum_energy=d["cum_energy"],
            cum_passes=d["cum_passes"],
            trace=PrecisionTrace.from_csv(d["trace"]),
            cost=d["cost"],
            conversions=d["conversions"],
            diverged=d["diverged"],
        )

    def curves_csv(self) -> str:
        val = dict(self.val)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "val_acc", "cum_cycles", "cum_energy"])
        for k, loss in enumerate(self.losses):
            it = k + 1
            acc = val.get(it, "")
            w.writerow([it, repr(loss), acc if acc == "" else repr(acc), self.cum_cycles[k], repr(self.cum_energy[k])])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Precision schedule


class Scheduler:
    """Per-layer precision for each iteration; FastAdaptive keeps r history."""

    def __init__(self, cfg: TrainConfig, n_layers: int) -> None:
        self.cfg = cfg
        self.L = n_layers
        self.params = ThresholdParams(cfg.iterations, n_layers, cfg.alpha, cfg.beta)
        self.last_r: dict[tuple[int, str], float] = {}
        self.current: list[PrecisionSetting | None] = [None] * n_layers

    def is_decision(self, i: int) -> bool:
        return (i - 1) % self.cfg.eval_every == 0

    def settings(self, i: int, model: Model, trace: PrecisionTrace) -> list[PrecisionSetting | None]:
        cfg, L, I = self.cfg, self.L, self.cfg.iterations
        low = PrecisionSetting(cfg.low_m, cfg.low_m, cfg.low_m)
        kind = cfg.schedule
        if kind == "fp32":
            return [None] * L
        if kind == "fixed":
            return [PrecisionSetting(cfg.fixed_m, cfg.fixed_m, cfg.fixed_m)] * L
        first_half = i <= I // 2
        if kind == "temporal-low-to-high":
            return [low if first_half else None] * L
        if kind == "temporal-high-to-low":
            return [None if first_half else low] * L
        if kind == "layerwise-low-to-high":
            return [low if l <= L // 2 else None for l in range(1, L + 1)]
        if kind == "layerwise-high-to-low":
            return [None if l <= L // 2 else low for l in range(1, L + 1)]
        if not self.is_decision(i):
            return self.current
        out = []
        for l, layer in enumerate(model.compute_layers, start=1):
            eps = threshold(l, i, self.params)
            r_w = relative_improvement(layer.W, cfg.g, axis=0)
            # no history before the first iteration: start at low precision
            r_a = self.last_r.get((l, "A"), math.nan)
            r_g = self.last_r.get((l, "G"), math.nan)
            ms = [decide(r, eps) if not math.isnan(r) else LOW_M for r in (r_w, r_a, r_g)]
            setting = PrecisionSetting(*ms)
            record_trace(trace, i, l, setting, (r_w, r_a, r_g), eps)
            out.append(setting)
        self.current = out
        return out

    def observe(self, i: int, model: Model) -> None:
        """Record r(A), r(G) of this iteration for the next decision."""
        if self.cfg.schedule != "fast-adaptive" or not self.is_decision(i + 1):
            return
        for l, layer in enumerate(model.compute_layers, start=1):
            self.last_r[(l, "A")] = relative_improvement(layer.matmul_input(), self.cfg.g, axis=1)
            self.last_r[(l, "G")] = relative_improvement(layer.grad_out, self.cfg.g, axis=1)


# ---------------------------------------------------------------------------
# Training steps


def build_model(cfg: TrainConfig, ds: datasets.Dataset, dtype=np.float32) -> Model:
    if cfg.model == "mlp":
        return mlp(int(np.prod(ds.input_shape)), ds.n_classes, cfg.hidden, cfg.depth, cfg.seed, dtype)
    if cfg.model == "cnn":
        return small_cnn(ds.n_classes, cfg.seed, dtype)
    raise ValueError(f"unknown model {cfg.model!r}")


def make_engine(cfg: TrainConfig, validate: bool = False) -> MatmulEngine:
    rng = make_rng(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
    return MatmulEngine(rng, cfg.rounding(), cfg.g, cfg.e_bits, ArrayConfig(g=cfg.g), CostModelParams(), validate)


def forward(model: Model, x: np.ndarray, y: np.ndarray, engine: MatmulEngine) -> tuple[float, np.ndarray]:
    """Loss on a batch and the cached gradient of the loss w.r.t. the logits."""
    logits = model.logits(x, engine)
    if not np.all(np.isfinite(logits)):
        raise Divergence("non-finite logits")
    loss, dlogits = softmax_cross_entropy(logits, y)
    if not math.isfinite(loss):
        raise Divergence(f"non-finite loss {loss}")
    return loss, dlogits


def backward(model: Model, cache: np.ndarray, engine: MatmulEngine) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(dE/dW, dE/db)`` for every compute layer, first layer first."""
    model.backward(cache, engine)
    grads = [(layer.dW, layer.db) for layer in model.compute_layers]
    for dw, _ in grads:
        if not np.all(np.isfinite(dw)):
            raise Divergence("non-finite gradient")
    return grads


def step(
    model: Model,
    grads: list[tuple[np.ndarray, np.ndarray]],
    lr: float,
    weight_storage: str = "fp32-master",
    g: int = 16,
) -> None:
    """SGD descent step; ``bfp-stored`` requantizes updated BFP-layer weights."""
    for layer, s, (dw, db) in zip(model.compute_layers, model.settings, grads):
        layer.W -= lr * dw
        layer.b -= lr * db
        if weight_storage == "bfp-stored" and s is not None:
            layer.W[...] = quantize_tensor(layer.W, s.m_W, g, NEAREST, axis=0).dequantize()


def evaluate(model: Model, x: np.ndarray, y: np.ndarray, engine: MatmulEngine, batch: int = 512) -> float:
    engine.accounting = False
    try:
        correct = 0
        for k in range(0, len(x), batch):
            pred = model.logits(x[k:k + batch], engine).argmax(axis=1)
            correct += int((pred == y[k:k + batch]).sum())
    finally:
        engine.accounting = True
    return correct / len(x)


def run_experiment(cfg: TrainConfig, ds: datasets.Dataset | None = None, validate: bool = False) -> RunRecord:
    """One seeded training run; divergence is recorded rather than raised."""
    if ds is None:
        ds = datasets.load(cfg.dataset, image=cfg.model == "cnn")
    model = build_model(cfg, ds)
    engine = make_engine(cfg, validate)
    sched = Scheduler(cfg, model.n_layers)
    record = RunRecord(asdict(cfg))
    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    n = len(ds.x_train)
    perm = order_rng.permutation(n)
    pos = 0
    for i in range(1, cfg.iterations + 1):
        if pos + cfg.batch_size > n:
            perm, pos = order_rng.permutation(n), 0
        idx = perm[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        model.settings = sched.settings(i, model, record.trace)
        try:
            loss, cache = forward(model, ds.x_train[idx], ds.y_train[idx], engine)
            grads = backward(model, cache, engine)
        except Divergence:
            record.diverged = True
            break
        sched.observe(i, model)
        step(model, grads, cfg.learning_rate, cfg.weight_storage, cfg.g)
        record.losses.append(loss)
        record.cum_cycles.append(engine.cost.cycles)
        record.cum_energy.append(engine.cost.energy)
        record.cum_passes.append(engine.cost.passes)
        if i % cfg.val_every == 0 or i == cfg.iterations:
            record.val.append((i, evaluate(model, ds.x_val, ds.y_val, engine)))
    record.cost = engine.cost.totals()
    record.conversions = engine.conversions
    return record


def _run_dict(cfg_dict: dict) -> str:
    return run_experiment(TrainConfig.from_dict(cfg_dict)).to_json()


def run_many(configs: list[TrainConfig], jobs: int = 1) -> list[RunRecord]:
    """Independent runs, optionally in parallel worker processes."""
    if jobs <= 1:
        return [run_experiment(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        texts = list(pool.map(_run_dict, [asdict(c) for c in configs]))
    return [RunRecord.from_json(t) for t in texts]


# ---------------------------------------------------------------------------
# Time to accuracy


@dataclass(frozen=True)
class TtaRow:
    label: str
    tta_cycles: int | None
    normalized: float | None

    def cells(self) -> list[str]:
        if self.tta_cycles is None:
            return [self.label, "N/A", "N/A"]
        return [self.label, str(self.tta_cycles), f"{self.normalized:.4f}"]


def first_time_at(record: RunRecord, target: float) -> int | None:
    for it, acc in record.val:
        if acc >= target:
            return record.cum_cycles[it - 1]
    return None


def time_to_accuracy(records: dict[str, RunRecord] | list[RunRecord], target: float) -> list[TtaRow]:
    """Simulated cycles until validation accuracy first reaches ``target``.

    Times are normalised by the fastest run that reaches the target; runs that
    never get there are reported as N/A.
    """
    if not isinstance(records, dict):
        records = {r.label: r for r in records}
    times = {name: first_time_at(rec, target) for name, rec in records.items()}
    reached = [t for t in times.values() if t is not None]
    best = min(reached) if reached else None
    rows = []
    for name, t in times.items():
        norm = None if t is None else (t / best if best else math.inf)
        rows.append(TtaRow(name, t, norm))
    return rows


def tta_csv(rows: list[TtaRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "tta_cycles", "normalized"])
    for row in rows:
        w.writerow(row.cells())
    return buf.getvalue()
