"""Multi-level Lorenz-96 testbed: truth dynamics, forecast model, datasets.

The system lives on a periodic ring of ``K`` points with ``L`` stacked
levels. Per level ``l`` the tendency is the classic Lorenz-96 advection
plus a diffusive coupling to the vertically adjacent levels:

    dX[l,k]/dt = (X[l,k+1] - X[l,k-2]) * X[l,k-1] - X[l,k] + F[l]
                 + c * sum_{m in {l-1, l+1} present} (X[m,k] - X[l,k])

Ring indices wrap mod K. The level coupling is reflective: a missing
neighbour level simply contributes nothing, so identical constant levels
feel zero coupling.

Time is integrated with classical RK4 at step ``dt``. Analysis time is
discrete: one analysis interval equals ``steps_per_interval`` RK4 steps,
and ``GridState.time_index`` counts analysis intervals.

The forecast model reuses the same integrator but adds ``model_bias`` to
the forcing, so ``model_bias = 0`` gives perfect-model experiments where
forecast error comes only from initial-condition perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import NumericalError

# Values beyond this are treated as an integration blow-up.
BLOWUP_LIMIT = 1.0e6


@dataclass(frozen=True)
class GridSpec:
    """Geometry and cadence of the testbed grid."""

    K: int = 40
    L: int = 4
    dt: float = 0.05
    steps_per_interval: int = 4

    def __post_init__(self) -> None:
        if self.K < 4:
            raise ValueError(f"K must be >= 4 (advection stencil), got {self.K}")
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps_per_interval < 1:
            raise ValueError(
                f"steps_per_interval must be >= 1, got {self.steps_per_interval}"
            )

    @property
    def n(self) -> int:
        """Total number of state scalars, L * K."""
        return self.L * self.K

    @property
    def interval_time(self) -> float:
        """Model time spanned by one analysis interval."""
        return self.dt * self.steps_per_interval


@dataclass
class GridState:
    """Full gridded state (L x K) at one analysis time index."""

    values: np.ndarray
    time_index: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"state values must be 2-D (L, K), got {self.values.shape}")

    def copy(self) -> "GridState":
        return GridState(self.values.copy(), self.time_index)


@dataclass(frozen=True)
class SystemParams:
    """Dynamics parameters. ``model_bias`` acts in the forecast model only."""

    forcing: float | np.ndarray = 8.0
    coupling: float = 0.5
    model_bias: float = 0.0

    def forcing_per_level(self, L: int) -> np.ndarray:
        f = np.broadcast_to(np.asarray(self.forcing, dtype=np.float64), (L,))
        if not np.all(np.isfinite(f)):
            raise ValueError("non-finite forcing")
        return f


@dataclass
class TrajectoryDataset:
    """Aligned truth (and optionally forecast) states at consecutive intervals.

    When forecasts are present, ``forecast_states[i]`` is the forecast
    model applied for ``lead_intervals`` intervals starting from a
    (possibly perturbed) copy of the truth ``lead_intervals`` earlier, so
    both sequences share time indices element by element.
    """

    spec: GridSpec
    truth_states: list[GridState]
    forecast_states: list[GridState] | None = None
    lead_intervals: int = 0

    def __post_init__(self) -> None:
        if self.forecast_states is not None:
            if self.lead_intervals < 1:
                raise ValueError("lead_intervals must be >= 1 when forecasts are present")
            if len(self.forecast_states) != len(self.truth_states):
                raise ValueError("truth and forecast sequences must have equal length")
            for t, f in zip(self.truth_states, self.forecast_states):
                if t.time_index != f.time_index:
                    raise ValueError("truth/forecast time indices misaligned")

    def __len__(self) -> int:
        return len(self.truth_states)


@dataclass(frozen=True)
class ClimatologyStats:
    """Per-level long-run mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if np.any(self.std <= 0):
            raise ValueError("climatology std must be strictly positive per level")


def _tendency(values: np.ndarray, forcing: np.ndarray, coupling: float) -> np.ndarray:
    xp1 = np.roll(values, -1, axis=1)
    xm1 = np.roll(values, 1, axis=1)
    xm2 = np.roll(values, 2, axis=1)
    tend = (xp1 - xm2) * xm1 - values + forcing[:, None]
    if values.shape[0] > 1 and coupling != 0.0:
        coup = np.zeros_like(values)
        coup[1:] += values[:-1] - values[1:]
        coup[:-1] += values[1:] - values[:-1]
        tend += coupling * coup
    return tend


def ml96_tendency(state: GridState, params: SystemParams, spec: GridSpec) -> np.ndarray:
    """Instantaneous tendency dX/dt of the multi-level Lorenz-96 system."""
    _check_state(state, spec, "ml96_tendency input")
    forcing = params.forcing_per_level(spec.L)
    return _tendency(state.values, forcing, params.coupling)


def _rk4(values: np.ndarray, f: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    """One classical RK4 step of dX/dt = f(X). Exposed for test harnesses."""
    k1 = f(values)
    k2 = f(values + 0.5 * dt * k1)
    k3 = f(values + 0.5 * dt * k2)
    k4 = f(values + dt * k3)
    return values + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(state: GridState, params: SystemParams, spec: GridSpec) -> GridState:
    """Advance one RK4 sub-interval step; the time index is unchanged."""
    _check_state(state, spec, "rk4_step input")
    forcing = params.forcing_per_level(spec.L)
    new = _rk4(state.values, lambda v: _tendency(v, forcing, params.coupling), spec.dt)
    if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > BLOWUP_LIMIT:
        raise NumericalError(
            f"rk4_step blew up at time_index {state.time_index} "
            f"(max |x| = {np.max(np.abs(new)):.3e})"
        )
    return GridState(new, state.time_index)


def forecast(
    state: GridState, intervals: int, params: SystemParams, spec: GridSpec
) -> GridState:
    """Apply the forecast model for ``intervals`` analysis intervals.

    The forecast model is the truth integrator with ``model_bias`` added
    to the forcing. Deterministic, and composes exactly:
    forecast(x, p + q) == forecast(forecast(x, p), q).
    """
    if intervals < 1:
        raise ValueError(f"intervals must be >= 1, got {intervals}")
    eff = replace(params, forcing=params.forcing_per_level(spec.L) + params.model_bias,
                  model_bias=0.0)
    current = state
    for step in range(intervals * spec.steps_per_interval):
        try:
            current = rk4_step(current, eff, spec)
        except NumericalError as exc:
            raise NumericalError(
                f"forecast diverged after {step} of "
                f"{intervals * spec.steps_per_interval} steps: {exc}"
            ) from exc
    return GridState(current.values, state.time_index + intervals)


def generate_truth_trajectory(
    spec: GridSpec,
    params: SystemParams,
    spinup_steps: int,
    n_intervals: int,
    seed: int,
) -> TrajectoryDataset:
    """Integrate from a seeded near-equilibrium start and record the attractor.

    The initial condition is the per-level forcing constant plus a small
    seeded perturbation; ``spinup_steps`` RK4 steps are discarded before
    the first recorded state. ``n_intervals`` states are then recorded at
    analysis-interval spacing, with time indices 0, 1, ...
    """
    if spinup_steps < 0:
        raise ValueError("spinup_steps must be >= 0")
    if n_intervals < 0:
        raise ValueError("n_intervals must be >= 0")
    rng = np.random.default_rng(seed)
    forcing = params.forcing_per_level(spec.L)
    values = np.tile(forcing[:, None], (1, spec.K))
    values = values + 1e-3 * rng.standard_normal(values.shape)
    state = GridState(values, 0)
    for step in range(spinup_steps):
        try:
            state = rk4_step(state, params, spec)
        except NumericalError as exc:
            raise NumericalError(f"spinup blew up at step {step}: {exc}") from exc
    states: list[GridState] = []
    for i in range(n_intervals):
        if i > 0:
            for _ in range(spec.steps_per_interval):
                state = rk4_step(state, params, spec)
        states.append(GridState(state.values.copy(), i))
    return TrajectoryDataset(spec=spec, truth_states=states)


def attach_forecasts(
    dataset: TrajectoryDataset,
    params: SystemParams,
    lead_intervals: int,
    ic_noise_std: float,
    seed: int,
) -> TrajectoryDataset:
    """Pair each truth state with a forecast launched ``lead_intervals`` earlier.

    Forecast initial conditions are the earlier truth plus seeded Gaussian
    noise of amplitude ``ic_noise_std``; together with ``model_bias`` this
    is the source of background error. The first ``lead_intervals`` truth
    states have no launch point and are dropped, so the returned dataset
    is fully paired.
    """
    if lead_intervals < 1:
        raise ValueError("lead_intervals must be >= 1")
    if ic_noise_std < 0:
        raise ValueError("ic_noise_std must be >= 0")
    truth = dataset.truth_states
    if len(truth) <= lead_intervals:
        raise ValueError(
            f"need more than {lead_intervals} truth states, got {len(truth)}"
        )
    rng = np.random.default_rng(seed)
    spec = dataset.spec
    paired_truth: list[GridState] = []
    forecasts: list[GridState] = []
    for i in range(lead_intervals, len(truth)):
        base = truth[i - lead_intervals]
        ic = base.values + ic_noise_std * rng.standard_normal(base.values.shape)
        fc = forecast(GridState(ic, base.time_index), lead_intervals, params, spec)
        paired_truth.append(truth[i])
        forecasts.append(fc)
    return TrajectoryDataset(
        spec=spec,
        truth_states=paired_truth,
        forecast_states=forecasts,
        lead_intervals=lead_intervals,
    )


def _stack_truth(dataset: TrajectoryDataset) -> np.ndarray:
    if not dataset.truth_states:
        raise ValueError("dataset is empty")
    return np.stack([s.values for s in dataset.truth_states])


def compute_climatology(dataset: TrajectoryDataset) -> ClimatologyStats:
    """Per-level mean and population std over all recorded truth states."""
    data = _stack_truth(dataset)  # (n, L, K)
    mean = data.mean(axis=(0, 2))
    std = data.std(axis=(0, 2))
    if np.any(std <= 0):
        raise ValueError("zero variance in dataset, cannot form climatology")
    return ClimatologyStats(mean=mean, std=std)


def compute_norm_stats(
    dataset: TrajectoryDataset,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-level state mean/std plus the residual scale s.

    ``s[l]`` is the population std of the truth-minus-forecast residual at
    level ``l``; it de-normalizes the diffusion variable before the skip
    connection adds the forecast back. Zero residual variance means the
    pairs are degenerate (e.g. a perfect model forecast from unperturbed
    truth) and is rejected.
    """
    clim = compute_climatology(dataset)
    if dataset.forecast_states is None:
        raise ValueError("dataset has no forecast states")
    truth = _stack_truth(dataset)
    fc = np.stack([s.values for s in dataset.forecast_states])
    residual = truth - fc
    s = residual.std(axis=(0, 2))
    if np.any(s <= 0):
        raise ValueError(
            "zero residual variance: forecasts equal truth, "
            "check lead/ic_noise_std/model_bias configuration"
        )
    return clim.mean, clim.std, s


def _check_state(state: GridState, spec: GridSpec, what: str) -> None:
    if state.values.shape != (spec.L, spec.K):
        raise ValueError(
            f"{what}: shape {state.values.shape} does not match spec "
            f"({spec.L}, {spec.K})"
        )
    if not np.all(np.isfinite(state.values)):
        raise NumericalError(f"{what}: non-finite values")
