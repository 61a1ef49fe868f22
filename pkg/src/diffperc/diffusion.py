"""Forward diffusion process: noise schedule, closed-form noising, training loss."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor


@dataclass
class NoiseSchedule:
    """Per-timestep signal coefficients, 1-indexed by timestep.

    ``alphas[t-1]`` is the per-step coefficient and ``alpha_bars[t-1]`` its
    running product, stored in float64 so long cumulative products stay
    accurate.
    """

    num_steps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def linear_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linearly spaced noise rates; the standard default is T=1000, 1e-4..2e-2."""
    if num_steps < 1:
        raise ConfigError(f"linear_schedule: num_steps must be >= 1, got {num_steps}")
    if not 0.0 <= beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"linear_schedule: need 0 <= beta_start <= beta_end < 1, got "
            f"({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(num_steps, alphas, np.cumprod(alphas))


def add_noise(z0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Jump straight to timestep t: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    t=0 is the no-noise case and returns z0 unchanged.
    """
    if not 0 <= t <= schedule.num_steps:
        raise ConfigError(
            f"add_noise: t={t} outside [0, {schedule.num_steps}]"
        )
    if t == 0:
        return z0
    if eps.shape != z0.shape:
        raise DimensionError(
            f"add_noise: noise shape {eps.shape} != latent shape {z0.shape}"
        )
    abar = schedule.alpha_bar(t)
    signal = float(np.sqrt(abar))
    noise = float(np.sqrt(1.0 - abar))
    return T.add(T.mul(z0, signal), T.mul(eps, noise))


def denoising_loss(model, z0: Tensor, cond, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between the true noise and the model's prediction.

    ``model`` is any callable (z_t, t, cond) -> prediction; an object with an
    ``eps`` attribute on its return value (the UNet output) also works.
    """
    zt = add_noise(z0, t, eps, schedule)
    pred = model(zt, t, cond)
    if hasattr(pred, "eps"):
        pred = pred.eps
    if pred.shape != eps.shape:
        raise DimensionError(
            f"denoising_loss: prediction shape {pred.shape} != noise shape {eps.shape}"
        )
    return T.tmean(T.square(T.sub(eps, pred)))
