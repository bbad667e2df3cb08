"""ODE solvers against closed-form trajectories.

For du/dtau = tau from u(0) = 0 the exact endpoint is 0.5; forward Euler
with N steps lands on h^2 * sum(k) = (N-1)/(2N), which is 0.45 at N = 10.
RK4 integrates polynomials of this degree exactly. These frozen values pin
the stepping scheme, not just convergence order.
"""

import numpy as np
import pytest
import torch

from flowcast import (
    IntegrationError,
    ModelConfig,
    SolverConfig,
    VelocityUNet,
    integrate,
    last_context_image,
    predict,
    predict_batch,
    sparsity_fill,
    temporal_reduce,
)
from conftest import random_sequence


class TestSolverConfig:
    def test_field_evaluation_counts(self):
        assert SolverConfig("euler", 10).field_evaluations == 10
        assert SolverConfig("rk4", 10).field_evaluations == 40

    def test_bad_method_rejected(self):
        with pytest.raises(ValueError):
            SolverConfig(method="midpoint")

    def test_bad_steps_rejected(self):
        with pytest.raises(ValueError):
            SolverConfig(steps=0)

    def test_bad_reduction_rejected(self):
        with pytest.raises(ValueError):
            SolverConfig(reduction="median")


class TestConstantField:
    # A constant field u = x1 - x0 moves x0 exactly onto x1 in one Euler step;
    # every scheme and step count is exact up to float accumulation.
    def _endpoints(self):
        rng = np.random.default_rng(1)
        return rng.random((2, 4, 4)), rng.random((2, 4, 4))

    @pytest.mark.parametrize("method,steps", [("euler", 1), ("euler", 10), ("rk4", 1), ("rk4", 10)])
    def test_recovers_target(self, method, steps):
        x0, x1 = self._endpoints()
        u = x1 - x0
        out = integrate(lambda x, t: u, x0, SolverConfig(method, steps))
        rel = np.abs(out - x1).max() / np.abs(x1).max()
        assert rel < 1e-12


class TestLinearInTauField:
    def test_euler_ten_steps_hits_frozen_value(self):
        out = integrate(lambda x, t: np.array([t]), np.array([0.0]), SolverConfig("euler", 10))
        h = 0.1
        expect = h * h * sum(range(10))  # 0.45 exactly in binary-friendly sums
        assert out[0] == pytest.approx(expect, abs=1e-15)
        assert out[0] == pytest.approx(0.45, abs=1e-12)

    def test_euler_error_halves_with_step_doubling(self):
        def run(steps):
            out = integrate(
                lambda x, t: np.array([t]), np.array([0.0]), SolverConfig("euler", steps)
            )
            return abs(out[0] - 0.5)

        ratio = run(20) / run(10)
        assert 0.45 < ratio < 0.55

    def test_rk4_is_exact_on_polynomial(self):
        out = integrate(lambda x, t: np.array([t]), np.array([0.0]), SolverConfig("rk4", 1))
        assert abs(out[0] - 0.5) <= 1e-10
        out = integrate(lambda x, t: np.array([t]), np.array([0.0]), SolverConfig("rk4", 7))
        assert abs(out[0] - 0.5) <= 1e-10


class TestFieldContract:
    def test_taus_stay_in_unit_interval(self):
        seen = []

        def field(x, t):
            seen.append(t)
            return np.zeros_like(x)

        integrate(field, np.zeros(3), SolverConfig("euler", 5))
        integrate(field, np.zeros(3), SolverConfig("rk4", 5))
        assert all(0.0 <= t <= 1.0 for t in seen)

    def test_euler_never_queries_the_endpoint(self):
        seen = []

        def field(x, t):
            seen.append(t)
            return np.zeros_like(x)

        integrate(field, np.zeros(3), SolverConfig("euler", 4))
        assert max(seen) < 1.0

    def test_rk4_touches_the_endpoint_exactly_once_per_final_step(self):
        seen = []

        def field(x, t):
            seen.append(t)
            return np.zeros_like(x)

        integrate(field, np.zeros(3), SolverConfig("rk4", 4))
        assert seen.count(1.0) == 1

    @pytest.mark.parametrize("method,steps", [("euler", 7), ("rk4", 3)])
    def test_evaluation_count_matches_config(self, method, steps):
        calls = []

        def field(x, t):
            calls.append(t)
            return np.zeros_like(x)

        cfg = SolverConfig(method, steps)
        integrate(field, np.zeros(2), cfg)
        assert len(calls) == cfg.field_evaluations

    def test_non_finite_state_reports_step(self):
        def field(x, t):
            return np.full_like(x, np.inf if t >= 0.3 else 0.0)

        with pytest.raises(IntegrationError) as info:
            integrate(field, np.zeros(2), SolverConfig("euler", 10))
        assert info.value.step_index == 3

    def test_non_finite_start_rejected(self):
        with pytest.raises(IntegrationError):
            integrate(lambda x, t: x, np.array([np.nan]), SolverConfig())

    def test_torch_and_numpy_agree(self):
        x0 = np.linspace(0.0, 1.0, 8)

        def field_np(x, t):
            return -0.5 * x + t

        out_np = integrate(field_np, x0, SolverConfig("rk4", 6))
        out_t = integrate(field_np, torch.as_tensor(x0), SolverConfig("rk4", 6))
        assert np.allclose(out_np, out_t.numpy(), atol=1e-12)


class TestTemporalReduce:
    def test_mean_and_last_hand_examples(self):
        frames = np.stack([np.full((1, 2, 2), v) for v in (0.0, 1.0, 0.5)])
        assert np.allclose(temporal_reduce(frames, "mean"), 0.5)
        assert np.allclose(temporal_reduce(frames, "last"), 0.5)
        frames = np.stack([np.full((1, 2, 2), v) for v in (0.2, 0.8)])
        assert np.allclose(temporal_reduce(frames, "mean"), 0.5)
        assert np.allclose(temporal_reduce(frames, "last"), 0.8)

    def test_batched_input_keeps_batch_axis(self):
        frames = np.random.default_rng(0).random((5, 3, 2, 4, 4))
        out = temporal_reduce(frames, "mean")
        assert out.shape == (5, 2, 4, 4)
        assert np.allclose(out, frames.mean(axis=1))

    def test_bad_reduction_rejected(self):
        with pytest.raises(ValueError):
            temporal_reduce(np.zeros((2, 1, 4, 4)), "sum")


class TestPredict:
    # An untrained model has an exactly zero field, so the transported stack
    # is the filled context itself and the reductions have closed forms.
    def _setup(self, tiny_model_cfg, tiny_shape):
        model = VelocityUNet(tiny_model_cfg, tiny_shape.volume, seed=0)
        seq = random_sequence(np.random.default_rng(5), tiny_shape, [True, False, True])
        return model, seq

    def test_zero_field_last_reduction_is_the_copy_forward_baseline(
        self, tiny_model_cfg, tiny_shape
    ):
        model, seq = self._setup(tiny_model_cfg, tiny_shape)
        out = predict(model, seq, SolverConfig("euler", 10, reduction="last"))
        assert np.array_equal(out, last_context_image(seq))

    def test_zero_field_mean_reduction_averages_the_filled_stack(
        self, tiny_model_cfg, tiny_shape
    ):
        model, seq = self._setup(tiny_model_cfg, tiny_shape)
        out = predict(model, seq, SolverConfig("rk4", 2, reduction="mean"))
        filled = sparsity_fill(seq).frames
        assert np.allclose(out, filled.mean(axis=0), atol=1e-7)

    def test_no_filling_leaves_zero_slots(self, tiny_model_cfg, tiny_shape):
        model, seq = self._setup(tiny_model_cfg, tiny_shape)
        out = predict(
            model, seq, SolverConfig("euler", 1, reduction="mean"), use_filling=False
        )
        assert np.allclose(out, seq.frames.mean(axis=0), atol=1e-7)

    def test_batch_shape_and_order(self, tiny_model_cfg, tiny_shape, tiny_cohort):
        model = VelocityUNet(tiny_model_cfg, tiny_shape.volume, seed=0)
        preds = predict_batch(model, tiny_cohort[:4], SolverConfig())
        assert preds.shape == (4, *tiny_shape.volume)
        solo = predict(model, tiny_cohort[2], SolverConfig())
        assert np.allclose(preds[2], solo, atol=1e-6)

    def test_restores_training_mode(self, tiny_model_cfg, tiny_shape, tiny_cohort):
        model = VelocityUNet(tiny_model_cfg, tiny_shape.volume, seed=0)
        model.train()
        predict_batch(model, tiny_cohort[:2], SolverConfig())
        assert model.training

    def test_empty_batch_rejected(self, tiny_model_cfg, tiny_shape):
        model = VelocityUNet(tiny_model_cfg, tiny_shape.volume, seed=0)
        with pytest.raises(ValueError):
            predict_batch(model, [], SolverConfig())
