"""Gaussian diffusion process: variance schedule and forward/reverse kernels.

The forward process destroys a signal x0 over N steps,
x_j = sqrt(1 - beta_j) * x_{j-1} + sqrt(beta_j) * eps, which composes to
the closed form x_j = sqrt(abar_j) * x0 + sqrt(1 - abar_j) * eps with
abar_j the running product of (1 - beta_s). The reverse kernel mean is
reparameterized through a noise prediction:

    mu = (x_j - beta_j / sqrt(1 - abar_j) * eps_pred) / sqrt(1 - beta_j)

and the reverse step samples N(mu, sigma_j^2 I) with
sigma_j^2 = (1 - abar_{j-1}) / (1 - abar_j) * beta_j. The empty-product
convention abar_0 = 1 makes sigma_1 = 0, so the last reverse step is
deterministic.

All functions here are deterministic given explicit noise arguments;
randomness is injected by callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule beta_1..beta_N and cumulative products abar_0..abar_N."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self) -> None:
        beta = np.asarray(self.beta, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        if beta.ndim != 1 or alpha_bar.shape != (beta.size + 1,):
            raise ValueError("alpha_bar must have one more entry than beta")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("beta entries must lie strictly in (0, 1)")
        if alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1 (empty product)")
        if np.any(np.diff(alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if alpha_bar[-1] <= 0:
            raise ValueError("alpha_bar[N] must stay positive")

    @property
    def n_steps(self) -> int:
        return self.beta.size

    def beta_at(self, j: int) -> float:
        self._check_step(j)
        return float(self.beta[j - 1])

    def alpha_bar_at(self, j: int) -> float:
        """abar_j for j in [0, N]; abar_0 == 1."""
        if not 0 <= j <= self.n_steps:
            raise ValueError(f"diffusion index {j} outside [0, {self.n_steps}]")
        return float(self.alpha_bar[j])

    def _check_step(self, j: int) -> None:
        if not 1 <= j <= self.n_steps:
            raise ValueError(f"diffusion step {j} outside [1, {self.n_steps}]")


def build_linear_schedule(
    n_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linearly spaced beta from beta_start to beta_end, endpoints inclusive."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )
    if n_steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - beta)))
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def forward_diffuse(
    x0: np.ndarray, j: int, schedule: NoiseSchedule, noise: np.ndarray
) -> np.ndarray:
    """Closed-form j-step noising: sqrt(abar_j) x0 + sqrt(1 - abar_j) noise."""
    schedule._check_step(j)
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    abar = schedule.alpha_bar_at(j)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def reverse_mean(
    x_j: np.ndarray, eps_pred: np.ndarray, j: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Reverse-kernel mean given a noise prediction at step j."""
    schedule._check_step(j)
    x_j = np.asarray(x_j)
    eps_pred = np.asarray(eps_pred)
    if eps_pred.shape != x_j.shape:
        raise ValueError(f"eps shape {eps_pred.shape} != x shape {x_j.shape}")
    beta = schedule.beta_at(j)
    abar = schedule.alpha_bar_at(j)
    return (x_j - beta / np.sqrt(1.0 - abar) * eps_pred) / np.sqrt(1.0 - beta)


def reverse_sigma(j: int, schedule: NoiseSchedule) -> float:
    """Reverse-step noise scale; zero at j = 1 because abar_0 = 1."""
    schedule._check_step(j)
    beta = schedule.beta_at(j)
    var = (1.0 - schedule.alpha_bar_at(j - 1)) / (1.0 - schedule.alpha_bar_at(j)) * beta
    return float(np.sqrt(var))


def reverse_step(
    x_j: np.ndarray,
    eps_pred: np.ndarray,
    j: int,
    schedule: NoiseSchedule,
    noise: np.ndarray,
) -> np.ndarray:
    """One reverse sample: reverse_mean + sigma_j * noise (deterministic at j = 1)."""
    mean = reverse_mean(x_j, eps_pred, j, schedule)
    noise = np.asarray(noise)
    if noise.shape != mean.shape:
        raise ValueError(f"noise shape {noise.shape} != state shape {mean.shape}")
    sigma = reverse_sigma(j, schedule)
    if sigma == 0.0:
        return mean
    return mean + sigma * noise
