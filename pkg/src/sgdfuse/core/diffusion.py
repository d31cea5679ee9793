"""DDPM machinery: noise schedule, forward noising, posterior steps and chain sampling.

Timesteps are 1-indexed; ``alpha_bar`` at t=0 is defined as 1. Every noise
tensor is passed in by the caller or drawn from a seeded ``torch.Generator``.
"""

import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import torch

from sgdfuse.errors import ConfigError, DimensionError, RangeError, SamplingError

logger = logging.getLogger(__name__)

Timestep = int | torch.Tensor
DenoiseFn = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, list[torch.Tensor]]]


@dataclass(frozen=True)
class NoiseSchedule:
    """beta, alpha and alpha_bar for t = 1..T, stored at index t-1 in float64."""

    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    @classmethod
    def from_betas(cls, betas: Iterable[float] | torch.Tensor) -> "NoiseSchedule":
        beta = torch.as_tensor(betas, dtype=torch.float64).flatten().clone()
        if beta.numel() < 1:
            raise ConfigError("A schedule needs at least one step")
        if not bool(((beta > 0) & (beta < 1)).all()):
            raise ConfigError("Every beta must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        return cls(beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, dim=0))

    @property
    def T(self) -> int:
        return int(self.beta.numel())

    def alpha_bar_prev(self) -> torch.Tensor:
        """alpha_bar at t-1 for t = 1..T, with alpha_bar_0 = 1."""
        return torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bar[:-1]])

    def posterior_variance(self) -> torch.Tensor:
        return (1.0 - self.alpha_bar_prev()) / (1.0 - self.alpha_bar) * self.beta


def make_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end``.

    Raises:
        ConfigError: On T < 1, bounds outside 0 < start <= end < 1, or an unknown kind.
    """
    if kind != "linear":
        raise ConfigError(f"Unknown schedule kind: {kind!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


def _check_t(t: Timestep, sched: NoiseSchedule) -> None:
    lo, hi = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) else (t, t)
    if lo < 1 or hi > sched.T:
        raise RangeError(f"Timestep outside [1, {sched.T}]: {lo if lo < 1 else hi}")


def _coef(values: torch.Tensor, t: Timestep, like: torch.Tensor) -> torch.Tensor:
    """values[t-1], broadcast over a BxCxHxW-like tensor."""
    if isinstance(t, torch.Tensor):
        picked = values[t.long().cpu() - 1]
        picked = picked.view(-1, *([1] * (like.ndim - 1)))
    else:
        picked = values[t - 1]
    return picked.to(device=like.device, dtype=like.dtype)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def q_sample(i0: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising ``sqrt(ab_t) * i0 + sqrt(1 - ab_t) * eps``."""
    _check_t(t, sched)
    _check_same_shape(i0, eps, "q_sample")
    ab = _coef(sched.alpha_bar, t, i0)
    return ab.sqrt() * i0 + (1.0 - ab).sqrt() * eps


def q_step(i_prev: torch.Tensor, t: Timestep, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One Markov transition ``sqrt(a_t) * i_prev + sqrt(1 - a_t) * eps``."""
    _check_t(t, sched)
    _check_same_shape(i_prev, eps, "q_step")
    a = _coef(sched.alpha, t, i_prev)
    return a.sqrt() * i_prev + (1.0 - a).sqrt() * eps


def posterior_step(
    i_t: torch.Tensor,
    t: Timestep,
    eps_hat: torch.Tensor,
    z: torch.Tensor | None,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Sample I_{t-1} from the learned reverse Gaussian.

    The mean is ``(i_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(a_t)``; the
    variance ``(1 - ab_{t-1}) / (1 - ab_t) * beta_t`` is zero at t = 1.
    """
    _check_t(t, sched)
    _check_same_shape(i_t, eps_hat, "posterior_step")
    a = _coef(sched.alpha, t, i_t)
    ab = _coef(sched.alpha_bar, t, i_t)
    beta = _coef(sched.beta, t, i_t)
    mean = (i_t - beta / (1.0 - ab).sqrt() * eps_hat) / a.sqrt()
    if z is None:
        return mean
    _check_same_shape(i_t, z, "posterior_step")
    sigma = _coef(sched.posterior_variance(), t, i_t).sqrt()
    return mean + sigma * z


def diffusion_loss(eps_true: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared noise-prediction error over every element."""
    _check_same_shape(eps_true, eps_hat, "diffusion_loss")
    return ((eps_hat - eps_true) ** 2).mean()


def sample_timesteps(batch: int, T: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform integer timesteps in [1, T]."""
    return torch.randint(1, T + 1, (batch,), generator=generator)


@dataclass
class ChainResult:
    """Final reverse-chain sample plus decoder features recorded per timestep."""

    sample: torch.Tensor
    trace: dict[int, list[torch.Tensor]] = field(default_factory=dict)


def sample_chain(
    condition: torch.Tensor,
    t_start: int,
    denoiser: DenoiseFn,
    sched: NoiseSchedule,
    rng_seed: int,
    record_at: Iterable[int] = (),
    stochastic: bool = True,
) -> ChainResult:
    """Noise ``condition`` to ``t_start`` and run the reverse chain down to t = 1.

    Args:
        condition: Bx5xHxW conditioned sample.
        t_start: First timestep of the chain.
        denoiser: Maps (I_t, t) to (eps_hat, decoder features).
        sched: Noise schedule.
        rng_seed: Seed of every noise draw in the chain.
        record_at: Timesteps whose decoder features are kept in the trace.
        stochastic: When False the posterior noise is zero.

    Raises:
        RangeError: If ``t_start`` is outside [1, T].
        SamplingError: If the denoiser fails; carries the failing step.
    """
    _check_t(t_start, sched)
    generator = torch.Generator(device=condition.device).manual_seed(rng_seed)
    eps = torch.randn(
        condition.shape, generator=generator, dtype=condition.dtype, device=condition.device
    )
    record = set(record_at)
    x = q_sample(condition, t_start, eps, sched)
    result = ChainResult(sample=x)
    for t in range(t_start, 0, -1):
        t_batch = torch.full((condition.shape[0],), t, dtype=torch.long, device=condition.device)
        try:
            eps_hat, features = denoiser(x, t_batch)
        except Exception as e:
            logger.error(f"Denoiser failed at t={t}: {e}")
            raise SamplingError(t) from e
        if t in record:
            result.trace[t] = features
        z = None
        if stochastic and t > 1:
            z = torch.randn(
                x.shape, generator=generator, dtype=x.dtype, device=x.device
            )
        x = posterior_step(x, t, eps_hat, z, sched)
    result.sample = x
    logger.debug(f"Reverse chain from t={t_start} recorded {sorted(result.trace)}")
    return result
