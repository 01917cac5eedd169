"""EDM-style diffusion machinery: noise schedules, preconditioning, samplers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class DiffusionError(ValueError):
    pass


@dataclass
class DiffusionConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise DiffusionError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0:
            raise DiffusionError(f"rho must be positive, got {self.rho}")
        if self.sigma_data <= 0:
            raise DiffusionError(f"sigma_data must be positive, got {self.sigma_data}")


def sample_training_sigma(cfg: DiffusionConfig, rng: np.random.Generator) -> float:
    """Draw a training noise level: ln(sigma) ~ N(p_mean, p_std^2)."""
    return float(np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal()))


def sigma_schedule(cfg: DiffusionConfig, n_steps: int) -> np.ndarray:
    """Strictly decreasing noise ladder from sigma_max down to sigma_min."""
    if n_steps < 2:
        raise DiffusionError(f"schedule needs n_steps >= 2, got {n_steps}")
    inv_rho = 1.0 / cfg.rho
    i = np.arange(n_steps, dtype=np.float64)
    lo, hi = cfg.sigma_min ** inv_rho, cfg.sigma_max ** inv_rho
    return (hi + i / (n_steps - 1) * (lo - hi)) ** cfg.rho


def precond_coeffs(cfg: DiffusionConfig, sigma: float) -> tuple[float, float, float, float]:
    """Return (c_skip, c_out, c_in, c_noise) for one noise level."""
    if sigma <= 0:
        raise DiffusionError(f"sigma must be positive, got {sigma}")
    s2 = sigma * sigma
    d2 = cfg.sigma_data * cfg.sigma_data
    c_skip = d2 / (s2 + d2)
    c_out = sigma * cfg.sigma_data / math.sqrt(s2 + d2)
    c_in = 1.0 / math.sqrt(s2 + d2)
    c_noise = math.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def precondition(raw_net: Callable, x_noisy, sigma: float, cond, cfg: DiffusionConfig):
    """Wrap a raw network F into the denoiser D(x; sigma, cond).

    D = c_out * F(c_in * x, c_noise, cond) + c_skip * x. Works for numpy
    arrays and for autodiff tensors (anything supporting * and +).
    """
    c_skip, c_out, c_in, c_noise = precond_coeffs(cfg, sigma)
    return c_out * raw_net(c_in * x_noisy, c_noise, cond) + c_skip * x_noisy


def add_noise(x0: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Forward process: x_sigma = x0 + sigma * eps with eps ~ N(0, I)."""
    if sigma < 0:
        raise DiffusionError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return x0.copy()
    return x0 + sigma * rng.standard_normal(x0.shape)


def _sampling_sigmas(cfg: DiffusionConfig, n_steps: int) -> np.ndarray:
    # 1-step sampling is a single denoiser evaluation at sigma_max
    if n_steps == 1:
        return np.array([cfg.sigma_max])
    return sigma_schedule(cfg, n_steps)


def _run_ladder(denoiser, cond, x: np.ndarray, sigmas: np.ndarray,
                rng: np.random.Generator, method: str) -> np.ndarray:
    if method not in ("restart", "euler"):
        raise DiffusionError(f"unknown sampler method {method!r}")
    x0_hat = x
    for i, sigma in enumerate(sigmas):
        x0_hat = denoiser(x, float(sigma), cond)
        if i + 1 < len(sigmas):
            if method == "restart":
                # renoise the clean estimate down to the next noise level
                x = x0_hat + sigmas[i + 1] * rng.standard_normal(x.shape)
            else:
                x = x + (sigmas[i + 1] - sigma) * (x - x0_hat) / sigma
    return np.clip(x0_hat, -1.0, 1.0)


def sample(denoiser: Callable, cond, n_steps: int, rng: np.random.Generator,
           cfg: DiffusionConfig, shape: tuple[int, ...],
           method: str = "restart") -> np.ndarray:
    """Iterative sampler: start from pure noise at sigma_max, denoise down the ladder."""
    if n_steps < 1:
        raise DiffusionError(f"n_steps must be >= 1, got {n_steps}")
    sigmas = _sampling_sigmas(cfg, n_steps)
    x = sigmas[0] * rng.standard_normal(shape)
    return _run_ladder(denoiser, cond, x, sigmas, rng, method)


def refine(grid_values: np.ndarray, denoiser: Callable, cond, sigma_restart: float,
           n_steps: int, rng: np.random.Generator, cfg: DiffusionConfig,
           method: str = "restart") -> np.ndarray:
    """Renoise an existing transcription and rerun the tail of the schedule.

    The tail is the suffix of sigma_schedule(n_steps) at or below
    sigma_restart, so refinement trajectories are consistent with sampling.
    """
    if not cfg.sigma_min < sigma_restart <= cfg.sigma_max:
        raise DiffusionError(
            f"sigma_restart {sigma_restart} outside ({cfg.sigma_min}, {cfg.sigma_max}]")
    sigmas = _sampling_sigmas(cfg, max(n_steps, 2))
    tail = sigmas[sigmas <= sigma_restart]
    if len(tail) == 0:
        tail = sigmas[-1:]
    x = grid_values + sigma_restart * rng.standard_normal(grid_values.shape)
    return _run_ladder(denoiser, cond, x, tail, rng, method)
