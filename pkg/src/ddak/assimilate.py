"""Data assimilation by conditional reverse diffusion.

One analysis is produced by running the full reverse diffusion in
residual space, conditioned two ways at once:

* the background forecast enters the noise-prediction network as a
  concatenated channel (learned conditioning), and
* observations are enforced at inference time by mixing, at every step,
  a "known" branch diffused from the interpolated observation field with
  the model's "unknown" branch, weighted by the soft mask.

Each step can be repeated ``resample_count`` times, re-noising the mixed
state by one forward step between passes, which lets the unknown region
adjust to the injected observations. Because abar_0 = 1, the final known
branch is noise-free, so the analysis matches the observed values
exactly wherever the soft mask is 1. The last line adds the skip
connection: analysis = background + s * generated_residual.

With no observations the soft mask is zero everywhere and the same loop
is a pure post-processor of the background, which is exactly how
``post_process`` is implemented.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from .denoiser import DenoiserParams, eps_forward, from_residual, normalize_background, to_residual
from .diffusion import NoiseSchedule, reverse_mean, reverse_sigma, reverse_step
from .dynamics import ClimatologyStats, GridSpec, GridState, SystemParams, forecast
from .errors import NumericalError
from .observation import (
    ObservationOperator,
    ObservationSet,
    SoftbleedConfig,
    hard_mask,
    interpolate,
    softbleed,
)


@dataclass(frozen=True)
class AssimilationConfig:
    """Everything the inference loop needs beyond the trained model."""

    schedule: NoiseSchedule
    softbleed: SoftbleedConfig = SoftbleedConfig()
    resample_count: int = 3
    seed: int = 0
    model_label: str = ""

    def __post_init__(self) -> None:
        if self.resample_count < 1:
            raise ValueError("resample_count must be >= 1")

    def digest(self) -> str:
        payload = {
            "sigma_g": self.softbleed.sigma_g,
            "d": self.softbleed.d,
            "resample_count": self.resample_count,
            "seed": self.seed,
            "n_steps": self.schedule.n_steps,
            "beta_first": float(self.schedule.beta[0]),
            "beta_last": float(self.schedule.beta[-1]),
            "model": self.model_label,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class AnalysisResult:
    """Assimilated state plus reproducibility diagnostics."""

    analysis: GridState
    diagnostics: dict


def mix_step(
    x_unknown: np.ndarray, x_known: np.ndarray, soft_mask: np.ndarray
) -> np.ndarray:
    """Pointwise convex mix m_s * known + (1 - m_s) * unknown over levels."""
    x_unknown = np.asarray(x_unknown)
    x_known = np.asarray(x_known)
    soft_mask = np.asarray(soft_mask)
    if x_unknown.shape != x_known.shape:
        raise ValueError(
            f"branch shapes differ: {x_unknown.shape} vs {x_known.shape}"
        )
    if soft_mask.ndim != 1 or soft_mask.size != x_unknown.shape[-1]:
        raise ValueError(
            f"soft mask length {soft_mask.shape} does not match state {x_unknown.shape}"
        )
    if np.any(soft_mask < 0) or np.any(soft_mask > 1):
        raise ValueError("soft mask values must lie in [0, 1]")
    return soft_mask * x_known + (1.0 - soft_mask) * x_unknown


def assimilate(
    x_hat: GridState,
    obs: ObservationSet,
    model: DenoiserParams,
    cfg: AssimilationConfig,
    clim: ClimatologyStats,
) -> AnalysisResult:
    """Sample one analysis conditioned on the background and observations."""
    schedule = cfg.schedule
    norm = model.norm
    L, K = x_hat.values.shape
    if L != model.arch.levels:
        raise ValueError(f"state has {L} levels, model expects {model.arch.levels}")

    m_h = hard_mask(obs.operator, K) if not obs.is_empty() else np.zeros(K)
    m_s = softbleed(m_h, cfg.softbleed)
    x_interp = interpolate(obs, clim, cfg.softbleed, K)
    r_known = to_residual(x_interp, x_hat.values, norm)
    cond = normalize_background(x_hat.values, norm)

    rng = np.random.default_rng(cfg.seed)
    shape = (L, K)
    x = rng.standard_normal(shape)
    step_norms: list[float] = []
    for j in range(schedule.n_steps, 0, -1):
        beta_j = schedule.beta_at(j)
        abar_prev = schedule.alpha_bar_at(j - 1)
        sigma = reverse_sigma(j, schedule)
        x_j = x
        mixed = x
        for u in range(cfg.resample_count):
            if u > 0:
                # one forward step re-noises the mixed state back to level j
                x_j = np.sqrt(1.0 - beta_j) * mixed + np.sqrt(beta_j) * rng.standard_normal(shape)
            eps = np.asarray(eps_forward(model, x_j, cond, j, schedule), dtype=np.float64)
            if sigma > 0.0:
                unknown = reverse_step(x_j, eps, j, schedule, rng.standard_normal(shape))
            else:
                unknown = reverse_mean(x_j, eps, j, schedule)
            known = np.sqrt(abar_prev) * r_known
            if abar_prev < 1.0:
                known = known + np.sqrt(1.0 - abar_prev) * rng.standard_normal(shape)
            mixed = mix_step(unknown, known, m_s)
        x = mixed
        if not np.all(np.isfinite(x)):
            raise NumericalError(
                f"assimilation produced non-finite state at diffusion step {j}"
            )
        step_norms.append(float(np.sqrt(np.mean(x * x))))

    analysis_values = from_residual(x, x_hat.values, norm)
    diagnostics = {
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "sigma_g": cfg.softbleed.sigma_g,
        "kernel_diameter": cfg.softbleed.d,
        "resample_count": cfg.resample_count,
        "n_observed_columns": obs.operator.n_columns,
        "residual_norms": step_norms,
    }
    return AnalysisResult(
        analysis=GridState(analysis_values, x_hat.time_index),
        diagnostics=diagnostics,
    )


def empty_observations(K: int, L: int) -> ObservationSet:
    return ObservationSet(
        operator=ObservationOperator(column_indices=(), K=K),
        y=np.zeros((L, 0)),
    )


def post_process(
    x_hat: GridState,
    model: DenoiserParams,
    cfg: AssimilationConfig,
    clim: ClimatologyStats,
) -> AnalysisResult:
    """Correct a background with the model alone (no observations).

    Identical to :func:`assimilate` with an empty observation set, bit for
    bit under equal seeds.
    """
    L, K = x_hat.values.shape
    return assimilate(x_hat, empty_observations(K, L), model, cfg, clim)


def cycle_seed(base_seed: int, cycle_index: int) -> int:
    """Independent per-cycle seed derived from the master seed."""
    return int(np.random.SeedSequence([base_seed, cycle_index]).generate_state(1)[0])


def run_cycle(
    initial_forecast: GridState,
    obs_stream: list[ObservationSet],
    first_model: DenoiserParams,
    cycle_model: DenoiserParams,
    cfg: AssimilationConfig,
    params: SystemParams,
    spec: GridSpec,
    clim: ClimatologyStats,
) -> list[AnalysisResult]:
    """Autoregressive analysis-forecast cycling.

    The first analysis conditions on ``initial_forecast`` with
    ``first_model`` (trained for that lead); every later cycle forecasts
    one interval ahead from the previous analysis and assimilates with
    ``cycle_model`` (trained for one-interval backgrounds).
    """
    if not obs_stream:
        raise ValueError("obs_stream must contain at least one observation set")
    results: list[AnalysisResult] = []
    background = initial_forecast
    for i, obs in enumerate(obs_stream):
        model = first_model if i == 0 else cycle_model
        step_cfg = replace(cfg, seed=cycle_seed(cfg.seed, i))
        try:
            result = assimilate(background, obs, model, step_cfg, clim)
        except NumericalError as exc:
            raise NumericalError(f"cycle {i}: {exc}") from exc
        results.append(result)
        if i + 1 < len(obs_stream):
            background = forecast(result.analysis, 1, params, spec)
    return results
