import math

import pytest
import torch

from app.core.exceptions import ParameterException, ShapeException, StateException, VocabularyException
from app.schemas.diffusion import LatentImage
from app.services.diffusion import (
    DiffusionModel,
    PretrainBatch,
    add_noise,
    ddim_denoise_step,
    ddim_invert_step,
    make_noise_schedule,
    pretrain_step,
)


class TestNoiseSchedule:
    """Linear beta schedule"""

    def test_alpha_bar_monotone_in_unit_interval(self):
        """Cumulative alphas decrease strictly and stay in (0, 1)"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        a = sched.alphas_cumprod
        assert a.dtype == torch.float64
        assert torch.all(a > 0) and torch.all(a < 1)
        assert torch.all(a[1:] < a[:-1])

    def test_first_alpha_bar(self):
        """alpha_bar(0) = 1 - beta_start"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        assert float(sched.alpha_bar(0)) == pytest.approx(1.0 - 1e-4, abs=1e-12)

    def test_invalid_range(self):
        """beta_start > beta_end and tiny T are rejected"""
        with pytest.raises(ParameterException):
            make_noise_schedule(1000, 0.02, 1e-4)
        with pytest.raises(ParameterException):
            make_noise_schedule(1, 1e-4, 0.02)


class TestAddNoise:
    """Forward noising"""

    def test_closed_form(self):
        """Result equals sqrt(a) x0 + sqrt(1 - a) eps"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        x0 = torch.randn(3, 4, 4, dtype=torch.float64)
        eps = torch.randn(3, 4, 4, dtype=torch.float64)
        a = float(sched.alpha_bar(500))

        noised = add_noise(LatentImage(data=x0), eps, 500, sched)

        assert noised.timestep == 500
        assert torch.allclose(noised.data, math.sqrt(a) * x0 + math.sqrt(1 - a) * eps, atol=1e-12)

    def test_shape_and_range_checks(self):
        """Mismatched noise and out-of-range timesteps are rejected"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        with pytest.raises(ShapeException):
            add_noise(LatentImage(data=torch.zeros(3, 4, 4)), torch.zeros(3, 4, 5), 10, sched)
        with pytest.raises(ParameterException):
            add_noise(LatentImage(data=torch.zeros(3, 4, 4)), torch.zeros(3, 4, 4), 1000, sched)


class TestDDIM:
    """Deterministic inversion and denoising"""

    def test_round_trip_on_random_latents(self):
        """Inverting then denoising with the same noise recovers the latent within 1e-5"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        generator = torch.Generator().manual_seed(0)
        for _ in range(100):
            x = torch.randn(3, 4, 4, generator=generator, dtype=torch.float64)
            eps = torch.randn(3, 4, 4, generator=generator, dtype=torch.float64)
            t, t_next = sorted(torch.randint(0, 1000, (2,), generator=generator).tolist())
            forward = ddim_invert_step(LatentImage(data=x, timestep=t), eps, t, t_next, sched)
            back = ddim_denoise_step(forward, eps, t_next, t, sched)
            assert back.timestep == t
            assert torch.allclose(back.data, x, atol=1e-5)

    def test_identity_when_t_equals_t_next(self):
        """A zero-length step returns the latent unchanged"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        x = torch.randn(3, 4, 4, dtype=torch.float64)
        out = ddim_invert_step(LatentImage(data=x, timestep=10), torch.randn(3, 4, 4, dtype=torch.float64), 10, 10, sched)
        assert torch.allclose(out.data, x, atol=1e-12)

    def test_consistent_with_forward_noising(self):
        """With the true noise, inversion from x0 matches add_noise"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        x0 = torch.randn(3, 4, 4, dtype=torch.float64)
        eps = torch.randn(3, 4, 4, dtype=torch.float64)
        x_t = add_noise(LatentImage(data=x0), eps, 100, sched)
        x_next = ddim_invert_step(x_t, eps, 100, 600, sched)
        assert torch.allclose(x_next.data, add_noise(LatentImage(data=x0), eps, 600, sched).data, atol=1e-10)

    def test_backward_inversion_rejected(self):
        """Inversion must move forward in time"""
        sched = make_noise_schedule(1000, 1e-4, 0.02)
        latent = LatentImage(data=torch.zeros(3, 4, 4), timestep=50)
        with pytest.raises(ParameterException):
            ddim_invert_step(latent, torch.zeros(3, 4, 4), 50, 10, sched)


class TestDiffusionModel:
    """Denoiser queries and the condition vocabulary"""

    def test_eps_shape_and_captures(self, frozen_model):
        """eps_hat matches the latent and every decoder layer is captured"""
        latent = LatentImage(data=torch.randn(3, 16, 16), timestep=5)
        out = frozen_model.predict_noise(latent, 5, frozen_model.embed_condition(["circle"]), capture=True)

        assert out.eps_hat.shape == (3, 16, 16)
        assert sorted(out.captured) == list(range(frozen_model.num_decoder_layers))
        for layer, pair in out.captured.items():
            scale = frozen_model.unet.decoder_scales[layer]
            assert pair.inter.shape == (frozen_model.unet.decoder_channels[layer], 16 // scale, 16 // scale)
            assert pair.cross.shape == (frozen_model.num_tokens, 16 // scale, 16 // scale)

    def test_cross_attention_maps_are_distributions(self, frozen_model):
        """Head-averaged attention sums to one over tokens at every pixel"""
        latent = LatentImage(data=torch.randn(3, 16, 16), timestep=5)
        out = frozen_model.predict_noise(latent, 5, frozen_model.embed_condition(None), capture=[0])
        assert torch.allclose(out.captured[0].cross.sum(dim=0), torch.ones(4, 4), atol=1e-5)

    def test_deterministic(self, frozen_model):
        """Repeated queries are bit-identical"""
        latent = LatentImage(data=torch.randn(3, 16, 16), timestep=3)
        cond = frozen_model.embed_condition(["square", "triangle"])
        first = frozen_model.predict_noise(latent, 3, cond).eps_hat
        second = frozen_model.predict_noise(latent, 3, cond).eps_hat
        assert torch.equal(first, second)

    def test_timestep_must_match_latent(self, frozen_model):
        """Querying at a timestep other than the latent's is an error"""
        latent = LatentImage(data=torch.randn(3, 16, 16), timestep=3)
        with pytest.raises(ParameterException):
            frozen_model.predict_noise(latent, 4, frozen_model.embed_condition(None))

    def test_unknown_category(self, frozen_model):
        """Names outside the vocabulary are rejected"""
        with pytest.raises(VocabularyException):
            frozen_model.embed_condition(["hexagon"])

    def test_null_condition(self, frozen_model):
        """None and an empty list both give the null condition"""
        a = frozen_model.embed_condition(None)
        b = frozen_model.embed_condition([])
        assert a.is_null and b.is_null
        assert torch.equal(a.tokens, b.tokens)

    def test_uninitialized_model(self, tiny_config):
        """A model with no weights refuses to predict"""
        model = DiffusionModel(tiny_config.unet, tiny_config.condition, tiny_config.schedule, tiny_config.data.class_names)
        with pytest.raises(StateException):
            model.embed_condition(None)

    def test_seeded_creation(self, make_model):
        """Same seed gives the same weights"""
        assert make_model(3).checksums() == make_model(3).checksums()
        assert make_model(3).checksums() != make_model(4).checksums()


class TestPretrainStep:
    """Epsilon-prediction updates"""

    def _batch(self):
        generator = torch.Generator().manual_seed(1)
        images = torch.rand(4, 3, 16, 16, generator=generator) * 2 - 1
        return PretrainBatch(images=images, captions=[["background", "circle"], ["square"], [], ["triangle"]])

    def test_reproducible_loss(self, make_model):
        """Same seed, same weights and same batch give the same loss"""
        losses = []
        for _ in range(2):
            model = make_model(0)
            optimizer = torch.optim.AdamW(list(model.parameters()), lr=1e-3)
            losses.append([pretrain_step(model, optimizer, self._batch(), rng_seed=s) for s in range(3)])
        assert losses[0] == pytest.approx(losses[1], abs=1e-6)

    def test_updates_weights(self, make_model):
        """A step changes the denoiser checksum"""
        model = make_model(0)
        before = model.checksums()["denoiser"]
        optimizer = torch.optim.AdamW(list(model.parameters()), lr=1e-3)
        loss = pretrain_step(model, optimizer, self._batch(), rng_seed=0)
        assert math.isfinite(loss) and loss > 0
        assert model.checksums()["denoiser"] != before

    def test_frozen_model_rejected(self, make_model):
        """Pretraining a frozen model is a state error"""
        model = make_model(0).freeze()
        optimizer = torch.optim.AdamW(list(model.parameters()), lr=1e-3)
        with pytest.raises(StateException):
            pretrain_step(model, optimizer, self._batch(), rng_seed=0)

    def test_caption_count_mismatch(self, make_model):
        """Captions must pair with images"""
        model = make_model(0)
        optimizer = torch.optim.AdamW(list(model.parameters()), lr=1e-3)
        batch = PretrainBatch(images=torch.zeros(2, 3, 16, 16), captions=[["circle"]])
        with pytest.raises(ParameterException):
            pretrain_step(model, optimizer, batch, rng_seed=0)
