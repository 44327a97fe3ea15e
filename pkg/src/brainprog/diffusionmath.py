"""Noise schedules, the forward process, and deterministic DDIM sampling.

Everything in this module is a pure function of its inputs. Latents are
torch tensors shaped (3, H', W', D') or batched (B, 3, H', W', D');
timesteps are 1-based with t=0 denoting the clean signal.
"""

from __future__ import annotations

from typing import Callable, Sequence

import math

import numpy as np
import torch

from .core import NoiseSchedule
from .errors import ConfigError, ShapeError


def build_schedule(T: int, beta_1: float = 0.0015, beta_T: float = 0.0205) -> NoiseSchedule:
    """Build a scaled-linear noise schedule (linear in sqrt(beta)).

    beta_t = (sqrt(beta_1) + (t-1)/(T-1) * (sqrt(beta_T) - sqrt(beta_1)))^2
    """
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_1 < beta_T < 1.0):
        raise ConfigError(f"need 0 < beta_1 < beta_T < 1, got beta_1={beta_1}, beta_T={beta_T}")
    steps = np.arange(T, dtype=np.float64)
    sqrt_beta = math.sqrt(beta_1) + steps / (T - 1) * (math.sqrt(beta_T) - math.sqrt(beta_1))
    beta = sqrt_beta**2
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _gather_abar(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar at timestep(s) t, shaped for broadcasting against ``like``."""
    if isinstance(t, int):
        return torch.as_tensor(sched.abar(t), dtype=like.dtype)
    t = torch.as_tensor(t)
    if t.min() < 1 or t.max() > sched.T:
        raise ConfigError(f"timesteps outside 1..{sched.T}")
    abar = torch.from_numpy(sched.alpha_bar).to(like.dtype)[t - 1]
    return abar.view(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample the forward process: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != signal shape {tuple(z0.shape)}")
    abar = _gather_abar(sched, t, z0)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def ddpm_posterior_mean(z_t: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Denoised mean of the reverse process given predicted noise.

    (1 / sqrt(alpha_t)) * (z_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat)
    """
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"noise shape {tuple(eps_hat.shape)} != signal shape {tuple(z_t.shape)}")
    if isinstance(t, int):
        if not 1 <= t <= sched.T:
            raise ConfigError(f"timestep {t} outside 1..{sched.T}")
        alpha_t = torch.as_tensor(float(sched.alpha[t - 1]), dtype=z_t.dtype)
    else:
        t = torch.as_tensor(t)
        if t.min() < 1 or t.max() > sched.T:
            raise ConfigError(f"timesteps outside 1..{sched.T}")
        alpha_t = torch.from_numpy(sched.alpha).to(z_t.dtype)[t - 1].view(-1, *([1] * (z_t.ndim - 1)))
    abar = _gather_abar(sched, t, z_t)
    return (z_t - (1.0 - alpha_t) / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(alpha_t)


def ddim_step(
    z_t: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from timestep t to t_prev < t.

    Predicts z0_hat from the noise estimate, then re-noises to t_prev using
    the convention abar(0) = 1.
    """
    if t_prev >= t:
        raise ConfigError(f"DDIM step requires t_prev < t, got {t_prev} >= {t}")
    if t_prev < 0:
        raise ConfigError(f"t_prev must be >= 0, got {t_prev}")
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"noise shape {tuple(eps_hat.shape)} != signal shape {tuple(z_t.shape)}")
    abar_t = sched.abar(t)
    abar_prev = sched.abar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    return math.sqrt(abar_prev) * z0_hat + math.sqrt(1.0 - abar_prev) * eps_hat


def ddim_timesteps(T: int, n_steps: int, t_start: int | None = None) -> list[int]:
    """Evenly spaced descending timestep sequence for DDIM.

    Returns the visited timesteps from ``t_start`` (default T) down to 0
    inclusive; consecutive entries form the (t, t_prev) step pairs. The
    sequence includes the start and 0 and never repeats a timestep.
    """
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}")
    top = T if t_start is None else t_start
    if not 1 <= top <= T:
        raise ConfigError(f"t_start {top} outside 1..{T}")
    grid = np.unique(np.round(np.linspace(0, top, min(n_steps, top) + 1)).astype(int))
    return [int(v) for v in grid[::-1]]


EpsPredictor = Callable[[torch.Tensor, int], torch.Tensor]


def ddim_trajectory(
    predict: EpsPredictor, z_start: torch.Tensor, timesteps: Sequence[int], sched: NoiseSchedule
) -> torch.Tensor:
    """Run DDIM steps along a descending timestep sequence ending at 0."""
    z = z_start
    for t, t_prev in zip(timesteps[:-1], timesteps[1:]):
        z = ddim_step(z, t, t_prev, predict(z, t), sched)
    return z


def ddim_sample(
    predict: EpsPredictor,
    shape: tuple[int, ...],
    n_steps: int,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    z_init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Generate a clean latent from unit Gaussian noise via n-step DDIM.

    ``predict(z_t, t)`` is the conditional noise estimator; conditioning is
    expected to be bound into the closure. ``z_init`` overrides the random
    starting state (used by inversion tests).
    """
    if z_init is None:
        z_init = torch.randn(shape, generator=generator)
    return ddim_trajectory(predict, z_init, ddim_timesteps(sched.T, n_steps), sched)


def denoise_from_intermediate(
    z_t: torch.Tensor,
    t: int,
    predict: EpsPredictor,
    sched: NoiseSchedule,
    n_steps: int = 10,
) -> torch.Tensor:
    """Fast DDIM denoising from an intermediate noisy state down to 0.

    Used for the periodic anatomical supervision pass during diffusion
    training; no gradient isolation happens here, so gradients flow through
    every ``predict`` evaluation.
    """
    if not 1 <= t <= sched.T:
        raise ConfigError(f"timestep {t} outside 1..{sched.T}")
    return ddim_trajectory(predict, z_t, ddim_timesteps(sched.T, n_steps, t_start=t), sched)
