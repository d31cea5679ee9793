"""Tests for the DDPM schedule, noising and reverse chain."""

import math

import pytest
import torch

from sgdfuse.core.diffusion import (
    DenoiseFn,
    NoiseSchedule,
    diffusion_loss,
    make_schedule,
    posterior_step,
    q_sample,
    q_step,
    sample_chain,
    sample_timesteps,
)
from sgdfuse.errors import ConfigError, DimensionError, RangeError, SamplingError

TOY = NoiseSchedule.from_betas([0.1, 0.2, 0.3, 0.4])


def _oracle(i0: torch.Tensor, sched: NoiseSchedule) -> DenoiseFn:
    """Denoiser that knows the clean sample and returns the exact noise."""

    def denoise(x: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        ab = sched.alpha_bar[t.long() - 1].view(-1, 1, 1, 1).to(x.dtype)
        return (x - ab.sqrt() * i0) / (1.0 - ab).sqrt(), [x]

    return denoise


class TestSchedule:
    """Tests for NoiseSchedule and make_schedule."""

    def test_cumulative_products(self) -> None:
        """Test alpha and alpha_bar of a hand-computed schedule."""
        torch.testing.assert_close(TOY.alpha, torch.tensor([0.9, 0.8, 0.7, 0.6], dtype=torch.float64))
        torch.testing.assert_close(
            TOY.alpha_bar, torch.tensor([0.9, 0.72, 0.504, 0.3024], dtype=torch.float64)
        )
        assert TOY.T == 4

    def test_previous_alpha_bar_starts_at_one(self) -> None:
        """Test that alpha_bar at t=0 is 1."""
        torch.testing.assert_close(
            TOY.alpha_bar_prev(), torch.tensor([1.0, 0.9, 0.72, 0.504], dtype=torch.float64)
        )
        assert TOY.posterior_variance()[0].item() == 0.0

    def test_linear_endpoints(self) -> None:
        """Test that a linear schedule spans the configured bounds."""
        sched = make_schedule(100, 1e-4, 0.02)
        assert sched.beta[0].item() == pytest.approx(1e-4)
        assert sched.beta[-1].item() == pytest.approx(0.02)
        assert bool((sched.alpha_bar[1:] < sched.alpha_bar[:-1]).all())

    @pytest.mark.parametrize(
        ("T", "start", "end", "kind"),
        [(0, 1e-4, 0.02, "linear"), (10, 0.5, 0.1, "linear"), (10, 0.0, 0.1, "linear"), (10, 1e-4, 0.02, "cosine")],
    )
    def test_invalid_schedules(self, T: int, start: float, end: float, kind: str) -> None:
        """Test that malformed schedules raise ConfigError."""
        with pytest.raises(ConfigError):
            make_schedule(T, start, end, kind)

    def test_betas_must_be_open_interval(self) -> None:
        """Test that beta = 1 is rejected."""
        with pytest.raises(ConfigError):
            NoiseSchedule.from_betas([0.5, 1.0])


class TestForward:
    """Tests for forward noising."""

    def test_zero_noise_scales_signal(self) -> None:
        """Test q_sample with eps = 0."""
        i0 = torch.randn(2, 5, 4, 4, dtype=torch.float64)
        out = q_sample(i0, 2, torch.zeros_like(i0), TOY)
        torch.testing.assert_close(out, math.sqrt(0.72) * i0)

    def test_per_item_timesteps(self) -> None:
        """Test that a timestep tensor applies one coefficient per batch item."""
        i0 = torch.ones(2, 1, 2, 2, dtype=torch.float64)
        out = q_sample(i0, torch.tensor([1, 4]), torch.zeros_like(i0), TOY)
        assert out[0].max().item() == pytest.approx(math.sqrt(0.9))
        assert out[1].max().item() == pytest.approx(math.sqrt(0.3024))

    def test_marginal_moments(self) -> None:
        """Test the mean and variance of I_t over many noise draws."""
        gen = torch.Generator().manual_seed(0)
        i0 = torch.full((20000, 1), 0.5, dtype=torch.float64)
        eps = torch.randn(i0.shape, generator=gen, dtype=torch.float64)
        out = q_sample(i0, 3, eps, TOY)
        assert out.mean().item() == pytest.approx(math.sqrt(0.504) * 0.5, abs=0.02)
        assert out.var().item() == pytest.approx(1.0 - 0.504, abs=0.02)

    def test_markov_steps_match_closed_form(self) -> None:
        """Test that two q_step transitions have the q_sample(t=2) variance."""
        gen = torch.Generator().manual_seed(1)
        i0 = torch.zeros(20000, 1, dtype=torch.float64)
        e1 = torch.randn(i0.shape, generator=gen, dtype=torch.float64)
        e2 = torch.randn(i0.shape, generator=gen, dtype=torch.float64)
        out = q_step(q_step(i0, 1, e1, TOY), 2, e2, TOY)
        assert out.var().item() == pytest.approx(1.0 - 0.72, abs=0.02)

    def test_timestep_range(self) -> None:
        """Test that t outside [1, T] raises RangeError."""
        i0 = torch.zeros(1, 1, 2, 2)
        for t in (0, 5):
            with pytest.raises(RangeError):
                q_sample(i0, t, i0, TOY)
        with pytest.raises(RangeError):
            q_sample(i0, torch.tensor([0]), i0, TOY)

    def test_noise_shape(self) -> None:
        """Test that eps must match the sample."""
        with pytest.raises(DimensionError):
            q_sample(torch.zeros(1, 1, 2, 2), 1, torch.zeros(1, 1, 2, 3), TOY)

    def test_sample_timesteps_range(self) -> None:
        """Test that sampled timesteps cover [1, T] only."""
        t = sample_timesteps(5000, 4, torch.Generator().manual_seed(0))
        assert set(t.tolist()) == {1, 2, 3, 4}


class TestReverse:
    """Tests for posterior steps and the reverse chain."""

    def test_last_step_is_deterministic(self) -> None:
        """Test that the posterior noise has no effect at t = 1."""
        x = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        eps_hat = torch.randn_like(x)
        a = posterior_step(x, 1, eps_hat, torch.randn_like(x), TOY)
        b = posterior_step(x, 1, eps_hat, None, TOY)
        torch.testing.assert_close(a, b)

    def test_zero_prediction_rescales(self) -> None:
        """Test that eps_hat = 0 gives I_t / sqrt(alpha_t)."""
        x = torch.randn(1, 2, 3, 3, dtype=torch.float64)
        out = posterior_step(x, 3, torch.zeros_like(x), None, TOY)
        torch.testing.assert_close(out, x / math.sqrt(0.7))

    def test_oracle_chain_recovers_clean_sample(self) -> None:
        """Test that exact noise predictions lead the chain back to I0."""
        sched = make_schedule(50, 1e-4, 0.05)
        i0 = torch.rand(1, 5, 8, 8, dtype=torch.float64) * 2 - 1
        result = sample_chain(i0, 50, _oracle(i0, sched), sched, rng_seed=3)
        torch.testing.assert_close(result.sample, i0, atol=1e-3, rtol=0)

    def test_chain_is_seeded(self) -> None:
        """Test that the same seed gives the same chain and traces are recorded."""
        i0 = torch.zeros(1, 1, 4, 4, dtype=torch.float64)

        def denoise(x: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
            return torch.zeros_like(x), [x.clone()]

        a = sample_chain(i0, 4, denoise, TOY, rng_seed=9, record_at=[2, 4])
        b = sample_chain(i0, 4, denoise, TOY, rng_seed=9, record_at=[2, 4])
        c = sample_chain(i0, 4, denoise, TOY, rng_seed=10)
        torch.testing.assert_close(a.sample, b.sample)
        assert not torch.equal(a.sample, c.sample)
        assert sorted(a.trace) == [2, 4]
        assert c.trace == {}

    def test_denoiser_failure_reports_step(self) -> None:
        """Test that a failing denoiser raises SamplingError with the step."""

        def denoise(x: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
            if int(t[0]) == 2:
                raise RuntimeError("boom")
            return torch.zeros_like(x), []

        with pytest.raises(SamplingError) as exc_info:
            sample_chain(torch.zeros(1, 1, 2, 2), 4, denoise, TOY, rng_seed=0)
        assert exc_info.value.step == 2

    def test_start_out_of_range(self) -> None:
        """Test that t_start above T is rejected."""
        with pytest.raises(RangeError):
            sample_chain(torch.zeros(1, 1, 2, 2), 5, _oracle(torch.zeros(1, 1, 2, 2), TOY), TOY, 0)


class TestDiffusionLoss:
    """Tests for the noise-prediction loss."""

    def test_exact_prediction(self) -> None:
        """Test that a perfect prediction has zero loss."""
        eps = torch.randn(2, 5, 4, 4)
        assert diffusion_loss(eps, eps).item() == 0.0

    def test_constant_offset(self) -> None:
        """Test that an offset c gives c squared."""
        eps = torch.randn(2, 5, 4, 4, dtype=torch.float64)
        assert diffusion_loss(eps, eps + 0.3).item() == pytest.approx(0.09)

    def test_shape_mismatch(self) -> None:
        """Test that mismatched tensors raise DimensionError."""
        with pytest.raises(DimensionError):
            diffusion_loss(torch.zeros(1, 5, 4, 4), torch.zeros(1, 5, 4, 2))
