"""Velocity network: embedding closed forms, zero-init exactness, FD gradients.

The gradient oracle is a central finite difference in float64 on a randomized
tiny network; the zero-init property is what makes an untrained model
collapse onto the copy-forward baseline, so it is asserted exactly.
"""

import numpy as np
import pytest
import torch

from flowcast import (
    FlowState,
    ModelConfig,
    VelocityUNet,
    fm_step_embedding,
    load_checkpoint,
    save_checkpoint,
    velocity_gradients,
)
from flowcast.model import BOTTLENECK_CONCAT, CROSS_ATTENTION

SPATIAL = (4, 16, 16)


def _cfg(**kw):
    defaults = dict(
        in_frames=3, base_features=8, channel_mults=(1, 2), attention_resolution=8
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


def _randomize(model, seed=0, std=0.05):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, std, generator=g)


class TestEmbedding:
    def test_tau_zero_closed_form(self):
        emb = fm_step_embedding(0.0, 16)
        assert np.array_equal(emb[:8], np.zeros(8))
        assert np.array_equal(emb[8:], np.ones(8))

    def test_minimal_dim_is_sin_cos(self):
        emb = fm_step_embedding(0.3, 2)
        assert emb == pytest.approx([np.sin(0.3), np.cos(0.3)])

    def test_vector_matches_scalars(self):
        taus = np.array([0.0, 0.4, 1.0])
        stacked = fm_step_embedding(taus, 12)
        for i, t in enumerate(taus):
            assert np.array_equal(stacked[i], fm_step_embedding(float(t), 12))

    def test_injective_on_unit_grid(self):
        taus = np.linspace(0.0, 1.0, 100)
        emb = fm_step_embedding(taus, 32)
        diffs = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=-1)
        off_diagonal = diffs[~np.eye(100, dtype=bool)]
        assert off_diagonal.min() > 1e-6

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            fm_step_embedding(0.5, 7)


class TestConstruction:
    def test_seeded_init_is_reproducible(self):
        a = VelocityUNet(_cfg(), SPATIAL, seed=9)
        b = VelocityUNet(_cfg(), SPATIAL, seed=9)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        a = VelocityUNet(_cfg(), SPATIAL, seed=1)
        b = VelocityUNet(_cfg(), SPATIAL, seed=2)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.state_dict().values(), b.state_dict().values())
        )

    def test_global_rng_left_untouched(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        VelocityUNet(_cfg(), SPATIAL, seed=77)
        assert torch.equal(torch.rand(3), expected)

    def test_indivisible_spatial_rejected(self):
        with pytest.raises(ValueError):
            VelocityUNet(_cfg(), (5, 16, 16))

    def test_bad_conditioning_rejected(self):
        with pytest.raises(ValueError):
            _cfg(conditioning="film")


class TestForward:
    def test_zero_init_output_is_exactly_zero(self):
        model = VelocityUNet(_cfg(), SPATIAL, seed=4)
        x = torch.rand(2, 3, *SPATIAL)
        with torch.no_grad():
            for tau in (0.0, 0.37, 1.0):
                out = model(x, tau)
                assert out.shape == x.shape
                assert float(out.abs().max()) == 0.0

    def test_unbatched_input_round_trip(self):
        model = VelocityUNet(_cfg(), SPATIAL, seed=4)
        _randomize(model)
        model.eval()
        x = torch.rand(3, *SPATIAL)
        single = model(x, 0.5)
        batched = model(x.unsqueeze(0), 0.5)
        assert single.shape == x.shape
        assert torch.equal(single, batched[0])

    def test_forward_is_deterministic(self):
        model = VelocityUNet(_cfg(), SPATIAL, seed=4)
        _randomize(model)
        model.eval()
        x = torch.rand(1, 3, *SPATIAL)
        assert torch.equal(model(x, 0.3), model(x, 0.3))

    @pytest.mark.parametrize("mode", [CROSS_ATTENTION, BOTTLENECK_CONCAT])
    def test_tau_conditions_the_field(self, mode):
        model = VelocityUNet(_cfg(conditioning=mode), SPATIAL, seed=4)
        _randomize(model)
        model.eval()
        x = torch.rand(1, 3, *SPATIAL)
        with torch.no_grad():
            low = model(x, 0.1)
            high = model(x, 0.9)
        assert float((low - high).abs().max()) > 0.0

    def test_per_sample_tau_vector(self):
        # Kernel selection depends on batch size, so the reference forwards
        # keep the batch of two and only vary which tau each sample gets.
        model = VelocityUNet(_cfg(), SPATIAL, seed=4)
        _randomize(model)
        model.eval()
        x = torch.rand(2, 3, *SPATIAL)
        with torch.no_grad():
            mixed = model(x, torch.tensor([0.2, 0.8]))
            low = model(x, torch.tensor([0.2, 0.2]))
            high = model(x, torch.tensor([0.8, 0.8]))
        assert torch.equal(mixed[0], low[0])
        assert torch.equal(mixed[1], high[1])
        assert not torch.equal(mixed[0], high[0])

    def test_wrong_frame_count_rejected(self):
        model = VelocityUNet(_cfg(), SPATIAL, seed=4)
        with pytest.raises(ValueError):
            model(torch.rand(1, 2, *SPATIAL), 0.5)

    def test_tau_out_of_range_rejected(self):
        model = VelocityUNet(_cfg(), SPATIAL, seed=4)
        with pytest.raises(ValueError):
            model(torch.rand(1, 3, *SPATIAL), 1.5)


class TestGradients:
    def test_zero_gradients_at_exact_fit(self):
        # Zero-init output matches a zero velocity target, so the quadratic
        # loss sits at a stationary point and every gradient vanishes.
        model = VelocityUNet(_cfg(), SPATIAL, seed=4)
        x = np.random.default_rng(0).random((1, 3, *SPATIAL), dtype=np.float32)
        grads, loss = velocity_gradients(
            model, FlowState(x, 0.5), np.zeros_like(x)
        )
        assert loss == 0.0
        assert all(float(g.abs().max()) == 0.0 for g in grads.values())

    @pytest.mark.parametrize("mode", [CROSS_ATTENTION, BOTTLENECK_CONCAT])
    def test_matches_finite_differences(self, mode):
        cfg = ModelConfig(
            in_frames=2,
            base_features=4,
            channel_mults=(1, 2),
            attention_resolution=4,
            conditioning=mode,
        )
        spatial = (2, 8, 8)
        model = VelocityUNet(cfg, spatial, seed=6).double()
        _randomize(model, seed=1)
        model.eval()
        rng = np.random.default_rng(2)
        x = rng.random((1, 2, *spatial))
        truth = rng.random((1, 2, *spatial)) * 0.1
        state = FlowState(x, 0.6)
        grads, _ = velocity_gradients(model, state, truth)

        def loss_at():
            with torch.no_grad():
                pred = model(torch.as_tensor(x, dtype=torch.float64), 0.6)
                return float(((pred - torch.as_tensor(truth)) ** 2).mean())

        h = 1e-5
        params = dict(model.named_parameters())
        checked = 0
        for name in sorted(params):
            flat = params[name].data.view(-1)
            index = int(rng.integers(flat.numel()))
            original = float(flat[index])
            flat[index] = original + h
            up = loss_at()
            flat[index] = original - h
            down = loss_at()
            flat[index] = original
            fd = (up - down) / (2 * h)
            an = float(grads[name].view(-1)[index])
            assert fd == pytest.approx(an, rel=1e-4, abs=1e-9), name
            checked += 1
        assert checked >= 6


class TestCheckpoint:
    def test_round_trip_preserves_everything(self, tmp_path):
        model = VelocityUNet(_cfg(), SPATIAL, seed=8)
        _randomize(model, seed=3)
        path = tmp_path / "model.pt"
        save_checkpoint(path, model, step=42, extra={"note": "tiny"})
        back, payload = load_checkpoint(path)
        assert payload["step"] == 42
        assert payload["extra"]["note"] == "tiny"
        for pa, pb in zip(model.state_dict().values(), back.state_dict().values()):
            assert torch.equal(pa, pb)
        x = torch.rand(1, 3, *SPATIAL)
        model.eval()
        assert torch.equal(model(x, 0.4), back(x, 0.4))

    def test_foreign_payload_rejected(self, tmp_path):
        path = tmp_path / "junk.pt"
        torch.save({"format": "something.else"}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)
