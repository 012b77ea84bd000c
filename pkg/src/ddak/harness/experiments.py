"""Experiment drivers: single-step, autoregressive, forecast-on-analysis, ablation.

Each driver walks a list of held-out cases (time indices in an evaluation
dataset carrying truth and background forecasts), runs the assimilation
under test, and emits flat MetricsRecord rows. Cases own independent RNG
streams derived from (master seed, case id, ...), so runs are
reproducible and cases can be evaluated in parallel worker threads
without changing any result; records are always assembled in case order.

Baseline rows mirror the assimilation scoreboards: the background
forecast itself, the interpolated observations, their soft-mask mixture,
and forecasts of shorter lead launched from exact truth states.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..assimilate import AssimilationConfig, assimilate, post_process, run_cycle
from ..denoiser import DenoiserParams
from ..diffusion import NoiseSchedule
from ..dynamics import ClimatologyStats, GridState, SystemParams, TrajectoryDataset, forecast
from ..observation import SoftbleedConfig, hard_mask, interpolate, observe, sample_columns, softbleed
from .metrics import MetricsRecord, rmse

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "single_step",
    "autoregressive",
    "forecast_on_assimilated",
    "ablation",
    "postprocess",
)


def derive_seed(*keys: int) -> int:
    """Stable independent seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by the experiment drivers."""

    kind: str = "single_step"
    m_cols_list: tuple[int, ...] = (4, 8, 16, 32, 40)
    sigma_g_list: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    strategy: str = "fixed"
    n_cases: int = 16
    cycle_length: int = 20
    case_spacing: int = 12
    delta_ladder: tuple[int, ...] = (0, 1, 2, 4, 8)
    sigma_g: float = 2.5
    kernel_diameter: int | None = None
    resample_count: int = 3
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.n_cases < 1:
            raise ValueError("need at least one case")
        if self.strategy not in ("fixed", "resampled"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        object.__setattr__(self, "m_cols_list", tuple(int(m) for m in self.m_cols_list))
        object.__setattr__(self, "sigma_g_list", tuple(float(s) for s in self.sigma_g_list))
        object.__setattr__(self, "delta_ladder", tuple(int(d) for d in self.delta_ladder))


@dataclass
class ExperimentInputs:
    """Loaded artifacts every driver needs."""

    dataset: TrajectoryDataset
    long_model: DenoiserParams
    schedule: NoiseSchedule
    clim: ClimatologyStats
    params: SystemParams
    short_model: DenoiserParams | None = None


def _check_m_cols(cfg: ExperimentConfig, K: int) -> None:
    for m in cfg.m_cols_list:
        if not 0 <= m <= K:
            raise ValueError(f"m_cols {m} outside [0, {K}]")


def _case_indices(cfg: ExperimentConfig, dataset: TrajectoryDataset,
                  min_index: int, need_after: int = 0) -> list[int]:
    indices = [min_index + i * cfg.case_spacing for i in range(cfg.n_cases)]
    if indices[-1] + need_after >= len(dataset):
        raise ValueError(
            f"dataset too short: need index {indices[-1] + need_after}, "
            f"have {len(dataset)} states"
        )
    return indices

def _assim_cfg(inputs: ExperimentInputs, cfg: ExperimentConfig, seed: int,
               sigma_g: float | None = None, label: str = "") -> AssimilationConfig:
    bleed = SoftbleedConfig(
        sigma_g=cfg.sigma_g if sigma_g is None else sigma_g,
        d=cfg.kernel_diameter if sigma_g is None else None,
    )
    return AssimilationConfig(schedule=inputs.schedule, softbleed=bleed,
                              resample_count=cfg.resample_count, seed=seed,
                              model_label=label)


def _run_cases(case_fn, n_cases: int, threads: int) -> list[list[MetricsRecord]]:
    if threads <= 1:
        return [case_fn(c) for c in range(n_cases)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(case_fn, range(n_cases)))


def _state_records(experiment: str, case: int, m_cols: int, sigma_g: float,
                   index: int, metric: str, estimate, truth) -> list[MetricsRecord]:
    """One aggregate row plus one row per level."""
    per_level = rmse(estimate, truth, per_level=True)
    rows = [MetricsRecord(experiment, case, "all", m_cols, sigma_g, index, metric,
                          rmse(estimate, truth))]
    rows += [
        MetricsRecord(experiment, case, f"level{l}", m_cols, sigma_g, index, metric,
                      float(v))
        for l, v in enumerate(per_level)
    ]
    return rows


def run_single_step(inputs: ExperimentInputs, cfg: ExperimentConfig) -> list[MetricsRecord]:
    """Assimilate once per (case, column count) and score against truth.

    Baselines per case: the input background, the interpolated
    observations, the soft-mask mixture of the two, and bias-only
    forecasts at every shorter lead launched from exact truth states.
    """
    ds = inputs.dataset
    spec = ds.spec
    lead = ds.lead_intervals
    _check_m_cols(cfg, spec.K)
    indices = _case_indices(cfg, ds, min_index=lead)

    def one_case(case: int) -> list[MetricsRecord]:
        i = indices[case]
        truth = ds.truth_states[i]
        background = ds.forecast_states[i]
        rows: list[MetricsRecord] = []
        ladder: dict[int, GridState] = {}
        for delta in range(1, lead + 1):
            start = ds.truth_states[i - delta]
            ladder[delta] = forecast(start, delta, inputs.params, spec)
        for m in cfg.m_cols_list:
            op = sample_columns(spec.K, m, cfg.strategy, step=0,
                                seed=derive_seed(cfg.seed, case, 1))
            obs = observe(truth, op)
            acfg = _assim_cfg(inputs, cfg, seed=derive_seed(cfg.seed, case, 2, m),
                              label="long_lead")
            result = assimilate(background, obs, inputs.long_model, acfg, inputs.clim)
            interp = interpolate(obs, inputs.clim, acfg.softbleed, spec.K)
            m_s = softbleed(hard_mask(op, spec.K), acfg.softbleed)
            mixture = m_s * interp + (1.0 - m_s) * background.values
            for metric, estimate in (
                ("analysis", result.analysis),
                ("forecast", background),
                ("interpolation", interp),
                ("mixture", mixture),
            ):
                rows += _state_records("single_step", case, m, acfg.softbleed.sigma_g,
                                       lead, metric, estimate, truth)
            for delta in range(1, lead + 1):
                rows += _state_records("single_step", case, m, acfg.softbleed.sigma_g,
                                       delta, "forecast_lead", ladder[delta], truth)
        return rows

    per_case = _run_cases(one_case, cfg.n_cases, cfg.threads)
    return [r for rows in per_case for r in rows]


def run_postprocess(inputs: ExperimentInputs, cfg: ExperimentConfig) -> list[MetricsRecord]:
    """Model-only correction of the background, scored against truth."""
    ds = inputs.dataset
    lead = ds.lead_intervals
    indices = _case_indices(cfg, ds, min_index=lead)

    def one_case(case: int) -> list[MetricsRecord]:
        i = indices[case]
        truth = ds.truth_states[i]
        background = ds.forecast_states[i]
        acfg = _assim_cfg(inputs, cfg, seed=derive_seed(cfg.seed, case, 2, 0),
                          label="long_lead")
        result = post_process(background, inputs.long_model, acfg, inputs.clim)
        rows = _state_records("postprocess", case, 0, acfg.softbleed.sigma_g, lead,
                              "postprocess", result.analysis, truth)
        rows += _state_records("postprocess", case, 0, acfg.softbleed.sigma_g, lead,
                               "forecast", background, truth)
        return rows

    per_case = _run_cases(one_case, cfg.n_cases, cfg.threads)
    return [r for rows in per_case for r in rows]


def run_autoregressive(inputs: ExperimentInputs, cfg: ExperimentConfig) -> list[MetricsRecord]:
    """Cycle analysis and one-interval forecasts along the truth trajectory.

    Per cycle index the analysis RMSE is recorded next to the RMSE of the
    interpolated observations, the reference its advantage is judged by.
    """
    if inputs.short_model is None:
        raise ValueError("autoregressive cycling needs the one-interval model")
    ds = inputs.dataset
    spec = ds.spec
    _check_m_cols(cfg, spec.K)
    if cfg.cycle_length < 1:
        raise ValueError("cycle_length must be >= 1")
    indices = _case_indices(cfg, ds, min_index=ds.lead_intervals,
                            need_after=cfg.cycle_length - 1)

    def one_case(case: int) -> list[MetricsRecord]:
        i0 = indices[case]
        rows: list[MetricsRecord] = []
        for m in cfg.m_cols_list:
            obs_stream = []
            for c in range(cfg.cycle_length):
                op = sample_columns(spec.K, m, cfg.strategy, step=c,
                                    seed=derive_seed(cfg.seed, case, 1, m))
                obs_stream.append(observe(ds.truth_states[i0 + c], op))
            acfg = _assim_cfg(inputs, cfg, seed=derive_seed(cfg.seed, case, 2, m),
                              label="cycle")
            results = run_cycle(ds.forecast_states[i0], obs_stream, inputs.long_model,
                                inputs.short_model, acfg, inputs.params, spec,
                                inputs.clim)
            for c, result in enumerate(results):
                truth = ds.truth_states[i0 + c]
                interp = interpolate(obs_stream[c], inputs.clim, acfg.softbleed, spec.K)
                rows += _state_records("autoregressive", case, m, acfg.softbleed.sigma_g,
                                       c, "analysis", result.analysis, truth)
                rows += _state_records("autoregressive", case, m, acfg.softbleed.sigma_g,
                                       c, "interpolation", interp, truth)
        return rows

    per_case = _run_cases(one_case, cfg.n_cases, cfg.threads)
    return [r for rows in per_case for r in rows]


def run_forecast_on_assimilated(inputs: ExperimentInputs,
                                cfg: ExperimentConfig) -> list[MetricsRecord]:
    """Forecast from analyses and compare with truth-launched longer leads.

    The truth-launched ladder quantifies lead time lost: a forecast of
    lead + delta from the exact truth is the reference the
    analysis-launched forecast of the base lead is matched against.
    """
    ds = inputs.dataset
    spec = ds.spec
    lead = ds.lead_intervals
    _check_m_cols(cfg, spec.K)
    max_delta = max(cfg.delta_ladder) if cfg.delta_ladder else 0
    indices = _case_indices(cfg, ds, min_index=max(lead, max_delta), need_after=lead)

    def one_case(case: int) -> list[MetricsRecord]:
        i = indices[case]
        truth_now = ds.truth_states[i]
        background = ds.forecast_states[i]
        valid_truth = ds.truth_states[i + lead]
        rows: list[MetricsRecord] = []
        ladder: dict[int, GridState] = {}
        for delta in cfg.delta_ladder:
            start = ds.truth_states[i - delta]
            ladder[delta] = forecast(start, lead + delta, inputs.params, spec)
        for m in cfg.m_cols_list:
            op = sample_columns(spec.K, m, cfg.strategy, step=0,
                                seed=derive_seed(cfg.seed, case, 1))
            obs = observe(truth_now, op)
            acfg = _assim_cfg(inputs, cfg, seed=derive_seed(cfg.seed, case, 2, m),
                              label="long_lead")
            result = assimilate(background, obs, inputs.long_model, acfg, inputs.clim)
            from_analysis = forecast(result.analysis, lead, inputs.params, spec)
            rows += _state_records("forecast_on_assimilated", case, m,
                                   acfg.softbleed.sigma_g, lead,
                                   "forecast_from_analysis", from_analysis, valid_truth)
            for delta in cfg.delta_ladder:
                rows += _state_records("forecast_on_assimilated", case, m,
                                       acfg.softbleed.sigma_g, lead + delta,
                                       "forecast_from_truth", ladder[delta], valid_truth)
        return rows

    per_case = _run_cases(one_case, cfg.n_cases, cfg.threads)
    return [r for rows in per_case for r in rows]


def run_sigma_ablation(inputs: ExperimentInputs, cfg: ExperimentConfig) -> list[MetricsRecord]:
    """Sweep the soft-mask kernel width over the column-count grid.

    Observation draws are shared across sigma values within a case so the
    sweep isolates the kernel width. The kernel diameter follows each
    sigma via the default round(4 sigma) + 1 rule.
    """
    ds = inputs.dataset
    spec = ds.spec
    lead = ds.lead_intervals
    _check_m_cols(cfg, spec.K)
    indices = _case_indices(cfg, ds, min_index=lead)

    def one_case(case: int) -> list[MetricsRecord]:
        i = indices[case]
        truth = ds.truth_states[i]
        background = ds.forecast_states[i]
        rows: list[MetricsRecord] = []
        for m in cfg.m_cols_list:
            op = sample_columns(spec.K, m, cfg.strategy, step=0,
                                seed=derive_seed(cfg.seed, case, 1))
            obs = observe(truth, op)
            for sigma in cfg.sigma_g_list:
                acfg = _assim_cfg(inputs, cfg, sigma_g=sigma, label="long_lead",
                                  seed=derive_seed(cfg.seed, case, 2, m))
                result = assimilate(background, obs, inputs.long_model, acfg, inputs.clim)
                rows += _state_records("ablation", case, m, sigma, lead, "analysis",
                                       result.analysis, truth)
        return rows

    per_case = _run_cases(one_case, cfg.n_cases, cfg.threads)
    return [r for rows in per_case for r in rows]


def ablation_table(records: list[MetricsRecord], sigma_list, m_cols_list,
                   variables) -> str:
    """Pivot ablation records into a (variable, m_cols) x sigma wide CSV."""
    by_key: dict[tuple[str, int, float], list[float]] = {}
    for r in records:
        if r.metric != "analysis":
            continue
        by_key.setdefault((r.variable, r.m_cols, r.sigma_g), []).append(r.value)
    header = "variable,m_cols," + ",".join(f"sigma_{s:g}" for s in sigma_list)
    lines = [header]
    for var in variables:
        for m in m_cols_list:
            cells = []
            for s in sigma_list:
                vals = by_key.get((var, m, float(s)))
                if not vals:
                    raise ValueError(f"no ablation records for {(var, m, s)}")
                cells.append(repr(float(np.mean(vals))))
            lines.append(f"{var},{m}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def run_experiment(inputs: ExperimentInputs, cfg: ExperimentConfig) -> list[MetricsRecord]:
    """Dispatch on cfg.kind."""
    driver = {
        "single_step": run_single_step,
        "autoregressive": run_autoregressive,
        "forecast_on_assimilated": run_forecast_on_assimilated,
        "ablation": run_sigma_ablation,
        "postprocess": run_postprocess,
    }[cfg.kind]
    logger.info("running %s: %d cases, m_cols %s", cfg.kind, cfg.n_cases, cfg.m_cols_list)
    return driver(inputs, cfg)
