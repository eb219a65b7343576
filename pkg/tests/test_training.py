from __future__ import annotations

import math

import numpy as np
import pytest

from fastbfp.fmac import pass_count
from fastbfp.numerics import NEAREST, RoundingMode, make_rng, quantize_tensor
from fastbfp.precision import PrecisionSetting, PrecisionTrace
from fastbfp.training import (
    RunRecord,
    TrainConfig,
    backward,
    forward,
    run_experiment,
    step,
    time_to_accuracy,
)
from fastbfp.training.data import two_moons
from fastbfp.training.engine import MatmulEngine
from fastbfp.training.harness import Scheduler, tta_csv
from fastbfp.training.model import mlp, softmax_cross_entropy


def fp32_engine(seed: int = 0) -> MatmulEngine:
    return MatmulEngine(make_rng(seed), RoundingMode.stochastic())


def batch(n: int = 32, n_in: int = 10, n_cls: int = 3, seed: int = 0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, n_in)).astype(dtype), rng.integers(0, n_cls, n)


def finite_difference_errors(model, x, y, probes: int, seed: int, h: float = 1e-6) -> np.ndarray:
    """Relative error of the analytic gradient at random parameter entries."""
    engine = fp32_engine()
    loss, cache = forward(model, x, y, engine)
    grads = backward(model, cache, engine)
    tensors = []
    for layer, (dw, db) in zip(model.compute_layers, grads):
        tensors += [(layer.W, dw.copy()), (layer.b, db.copy())]
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(probes):
        p, g = tensors[rng.integers(len(tensors))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up, _ = forward(model, x, y, engine)
        p[idx] = old - h
        down, _ = forward(model, x, y, engine)
        p[idx] = old
        numeric = (up - down) / (2 * h)
        analytic = float(g[idx])
        errors.append(abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    return np.array(errors)


class TestForward:
    def test_zero_weights_give_uniform_loss(self):
        model = mlp(10, 5, hidden=8, depth=3)
        for layer in model.compute_layers:
            layer.W[...] = 0
        x, y = batch(n_cls=5)
        loss, _ = forward(model, x, y, fp32_engine())
        assert loss == pytest.approx(math.log(5), rel=1e-6)

    def test_fp32_bypass_is_plain_numpy(self):
        model = mlp(10, 3, hidden=8, depth=3, seed=4)
        x, y = batch()
        got = model.logits(x, fp32_engine())
        h = x
        for k, layer in enumerate(model.compute_layers):
            h = h @ layer.W + layer.b
            if k < model.n_layers - 1:
                h = np.maximum(h, 0)
        assert np.array_equal(got, h)

    def test_m4_linear_layer_error_bound(self):
        model = mlp(40, 6, depth=1, seed=2)
        layer = model.compute_layers[0]
        x, _ = batch(n=8, n_in=40)
        s = PrecisionSetting(4, 4, 4)
        model.settings = [s]
        got = model.logits(x, fp32_engine()).astype(np.float64)
        exact = x.astype(np.float64) @ layer.W + layer.b

        def unit(t, axis):
            q = quantize_tensor(t, 4, 16, NEAREST, axis=axis)
            e = np.repeat(q.shared_exponents.astype(np.float64), 16, axis=-1)[:, : t.shape[axis]]
            u = 2.0 ** (e - 3)
            return q.dequantize().astype(np.float64), (u if axis == 1 else u.T)

        xq, ux = unit(x, 1)
        _, uw = unit(layer.W, 0)
        # every product error is below |x_q| * unit_w + |w| * unit_x; FP32 folding adds a little
        bound = np.abs(xq) @ uw + ux @ np.abs(layer.W) + 1e-5 * (np.abs(x) @ np.abs(layer.W))
        assert np.all(np.abs(got - exact) <= bound)


class TestBackward:
    def test_zero_upstream_gradient(self):
        model = mlp(10, 3, hidden=8, depth=3)
        model.settings = [PrecisionSetting(2, 2, 2)] * 3
        x, _ = batch()
        engine = fp32_engine()
        model.logits(x, engine)
        grads = backward(model, np.zeros((32, 3), dtype=np.float32), engine)
        assert all(not dw.any() and not db.any() for dw, db in grads)

    def test_fp32_linear_gradient_is_analytic(self):
        model = mlp(6, 4, depth=1)
        x, y = batch(n_in=6, n_cls=4)
        loss, cache = forward(model, x, y, fp32_engine())
        (dw, db), = backward(model, cache, fp32_engine())
        _, dlogits = softmax_cross_entropy(x @ model.compute_layers[0].W + model.compute_layers[0].b, y)
        assert np.allclose(dw, x.T @ dlogits, rtol=1e-6, atol=1e-7)
        assert np.allclose(db, dlogits.sum(axis=0))

    def test_finite_differences(self):
        model = mlp(5, 3, hidden=7, depth=2, seed=1, dtype=np.float64)
        x, y = batch(n=16, n_in=5, dtype=np.float64)
        assert finite_difference_errors(model, x, y, probes=50, seed=0).max() < 1e-4

    def test_stochastic_gradient_is_unbiased(self):
        # A is exact at m=4 and G sits on the 3-bit noise grid of m=2 below the
        # saturating top code, so the expected BFP weight gradient is the FP32 one
        rng = np.random.default_rng(5)
        a = (rng.integers(-15, 16, (16, 3)) / 8).astype(np.float32)
        a[0] = 1.0
        d = (rng.integers(-24, 25, (16, 2)) / 16).astype(np.float32)
        d[0] = 1.0
        engine = MatmulEngine(make_rng(3), RoundingMode.stochastic(3))
        s = PrecisionSetting(4, 4, 2)
        trials = 10_000
        samples = np.stack([engine.grad_w(a, d, s) for _ in range(trials)]).astype(np.float64)
        want = a.astype(np.float64).T @ d
        se = samples.std(axis=0, ddof=1) / math.sqrt(trials)
        assert np.all(np.abs(samples.mean(axis=0) - want) <= 3 * se + 1e-12)


class TestStep:
    def grads_for(self, model):
        x, y = batch()
        engine = fp32_engine()
        loss, cache = forward(model, x, y, engine)
        return [(dw.copy(), db.copy()) for dw, db in backward(model, cache, engine)]

    def test_zero_learning_rate(self):
        model = mlp(10, 3, hidden=8, depth=3)
        before = [w.copy() for w in model.weights()]
        step(model, self.grads_for(model), 0.0)
        assert all(np.array_equal(a, b) for a, b in zip(before, model.weights()))

    def test_quadratic_closed_form(self):
        model = mlp(4, 4, depth=1)
        layer = model.compute_layers[0]
        w0 = layer.W.copy()
        # loss 0.5 * |W|^2 has gradient W, so one step scales W by (1 - lr)
        step(model, [(w0.copy(), np.zeros(4, dtype=np.float32))], 0.25)
        assert np.array_equal(layer.W, w0 - np.float32(0.25) * w0)

    def test_bfp_stored_weights(self):
        model = mlp(10, 3, hidden=8, depth=3)
        model.settings = [PrecisionSetting(4, 4, 4)] * 3
        grads = self.grads_for(model)
        want = [quantize_tensor(w - np.float32(0.1) * dw, 4, 16, NEAREST, axis=0).dequantize()
                for w, (dw, _) in zip(model.weights(), grads)]
        step(model, grads, 0.1, "bfp-stored")
        assert all(np.array_equal(a, b) for a, b in zip(want, model.weights()))


def small(schedule: str, **kw) -> TrainConfig:
    base = dict(schedule=schedule, iterations=40, hidden=16, depth=3, val_every=10)
    base.update(kw)
    return TrainConfig(**base)


class TestRunExperiment:
    def test_seeded_determinism(self):
        a = run_experiment(small("fast-adaptive", seed=3))
        b = run_experiment(small("fast-adaptive", seed=3))
        assert a.losses == b.losses and a.val == b.val
        assert a.trace.to_csv() == b.trace.to_csv()

    def test_fp32_reaches_reference_band(self):
        rec = run_experiment(TrainConfig(schedule="fp32", iterations=300))
        assert rec.final_accuracy > 0.9
        assert rec.conversions == 0

    def test_validation_mode_checks_every_tensor(self):
        rec = run_experiment(small("fixed", fixed_m=2, iterations=5), validate=True)
        assert rec.conversions > 0 and not rec.diverged

    def test_divergence_is_recorded(self):
        with np.errstate(all="ignore"):
            rec = run_experiment(small("fp32", learning_rate=1e6))
        assert rec.diverged
        assert len(rec.losses) < 40

    def test_record_json_round_trip(self):
        rec = run_experiment(small("fast-adaptive", iterations=10))
        back = RunRecord.from_json(rec.to_json())
        assert back.losses == rec.losses and back.trace.to_csv() == rec.trace.to_csv()
        assert back.curves_csv() == rec.curves_csv()

    def test_pass_accounting_matches_layer_shapes(self):
        cfg = small("fixed", fixed_m=4, iterations=1, batch_size=32)
        rec = run_experiment(cfg)
        sizes = [64, 16, 16, 10]
        want = 0
        for k, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            pc = pass_count(4, 4)
            want += 32 * n_out * -(-n_in // 16) * pc
            want += n_in * n_out * -(-32 // 16) * pc
            if k > 0:
                want += 32 * n_in * -(-n_out // 16) * pc
        assert rec.total_passes == want == rec.cum_passes[-1]

    def test_eval_stride_reuses_decisions(self):
        cfg = small("fast-adaptive", iterations=12, eval_every=4)
        rec = run_experiment(cfg)
        assert sorted({r.iteration for r in rec.trace.rows}) == [1, 5, 9]

    def test_first_decision_uses_low_width(self):
        cfg = small("fast-adaptive", iterations=5)
        model = mlp(64, 10, 16, 3)
        trace = PrecisionTrace()
        out = Scheduler(cfg, 3).settings(1, model, trace)
        assert all(s.m_A == 2 and s.m_G == 2 for s in out)
        assert all(math.isnan(r.r) for r in trace.rows if r.tensor_kind != "W")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(schedule="nope")
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"schedule": "fp32", "colour": 1})

    def test_other_dataset(self):
        ds = two_moons(400)
        rec = run_experiment(small("fixed", fixed_m=4, iterations=20, dataset="moons"), ds)
        assert 0 <= rec.final_accuracy <= 1


class TestTimeToAccuracy:
    def test_unreached_is_na(self):
        rec = run_experiment(small("fp32", iterations=10))
        (row,) = time_to_accuracy({"fp32": rec}, 1.01)
        assert row.tta_cycles is None and row.cells()[1:] == ["N/A", "N/A"]
        assert "N/A" in tta_csv([row])

    def test_identical_runs_identical_times(self):
        a = run_experiment(small("fixed", fixed_m=2))
        b = run_experiment(small("fixed", fixed_m=2))
        rows = time_to_accuracy({"a": a, "b": b}, 0.3)
        assert rows[0].tta_cycles == rows[1].tta_cycles is not None
        assert rows[0].normalized == rows[1].normalized == 1.0

    def test_single_run(self):
        rec = run_experiment(small("fp32"))
        rows = time_to_accuracy([rec], 0.2)
        assert len(rows) == 1 and rows[0].normalized == 1.0
        assert rows[0].tta_cycles == rec.cum_cycles[rec.val[0][0] - 1]
