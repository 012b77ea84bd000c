"""Simulated column observations, masks, and anomaly interpolation.

Observations are whole columns: every level measured at a ring position,
so the observation operator has exactly one unit entry per row and is
fully described by its sorted column index list. Masks live on the ring
(length K) and are broadcast over levels when applied.

The soft mask is produced by softbleed, a (max, x)-convolution of the
hard mask with an unnormalized Gaussian kernel: each position takes the
maximum over nearby observed points of exp(-r^2 / (2 sigma^2)), so
observed points keep the exact value 1 and influence bleeds outward to a
radius of (d - 1) / 2 cells.

Observed values are spread over the grid by a Gaussian-kernel weighted
average of their climatology anomalies (exact at observed points, pure
climatology far away), standing in for a kriging interpolator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ClimatologyStats, GridState

WEIGHT_CUTOFF = 1e-12


@dataclass(frozen=True)
class ObservationOperator:
    """Sparse column-selection operator, one unit row per observed scalar."""

    column_indices: tuple[int, ...]
    K: int

    def __post_init__(self) -> None:
        cols = tuple(int(c) for c in self.column_indices)
        if sorted(set(cols)) != list(cols):
            raise ValueError("column indices must be sorted and unique")
        if cols and (cols[0] < 0 or cols[-1] >= self.K):
            raise ValueError(f"column indices must lie in [0, {self.K})")
        object.__setattr__(self, "column_indices", cols)

    @property
    def n_columns(self) -> int:
        return len(self.column_indices)

    def as_matrix(self, L: int) -> np.ndarray:
        """Dense A with one unit entry per row, rows ordered level-major."""
        A = np.zeros((L * self.n_columns, L * self.K))
        for l in range(L):
            for c, k in enumerate(self.column_indices):
                A[l * self.n_columns + c, l * self.K + k] = 1.0
        return A


@dataclass(frozen=True)
class ObservationSet:
    """Observed values y (levels x columns) with their operator."""

    operator: ObservationOperator
    y: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=np.float64)
        object.__setattr__(self, "y", y)
        if y.ndim != 2 or y.shape[1] != self.operator.n_columns:
            raise ValueError(
                f"y shape {y.shape} does not match {self.operator.n_columns} columns"
            )
        if not np.all(np.isfinite(y)):
            raise ValueError("observed values must be finite")

    @property
    def n_scalars(self) -> int:
        return self.y.size

    def is_empty(self) -> bool:
        return self.operator.n_columns == 0


@dataclass(frozen=True)
class SoftbleedConfig:
    """Gaussian kernel std (grid cells) and odd kernel diameter."""

    sigma_g: float = 2.5
    d: int | None = None

    def __post_init__(self) -> None:
        if not self.sigma_g > 0:
            raise ValueError("sigma_g must be positive")
        if self.d is None:
            object.__setattr__(self, "d", default_diameter(self.sigma_g))
        if self.d < 1 or self.d % 2 == 0:
            raise ValueError(f"kernel diameter must be odd and >= 1, got {self.d}")

    @property
    def radius(self) -> int:
        return (self.d - 1) // 2


def default_diameter(sigma_g: float) -> int:
    """round(4 sigma) + 1, bumped to the next odd integer when even."""
    d = int(round(4.0 * sigma_g)) + 1
    return d if d % 2 == 1 else d + 1


def sample_columns(
    K: int, m_cols: int, strategy: str, step: int, seed: int
) -> ObservationOperator:
    """Draw ``m_cols`` distinct ring positions uniformly without replacement.

    The ``fixed`` strategy ignores ``step`` and returns the same set every
    call; ``resampled`` mixes ``step`` into the stream so each step gets
    its own reproducible set.
    """
    if not 0 <= m_cols <= K:
        raise ValueError(f"m_cols must lie in [0, {K}], got {m_cols}")
    if strategy == "fixed":
        rng = np.random.default_rng([seed])
    elif strategy == "resampled":
        rng = np.random.default_rng([seed, step])
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    cols = rng.choice(K, size=m_cols, replace=False)
    return ObservationOperator(column_indices=tuple(sorted(int(c) for c in cols)), K=K)


def observe(truth: GridState, op: ObservationOperator) -> ObservationSet:
    """Extract y[l, c] = truth[l, columns[c]] exactly."""
    if truth.values.shape[1] != op.K:
        raise ValueError(
            f"state has {truth.values.shape[1]} ring points, operator expects {op.K}"
        )
    cols = np.array(op.column_indices, dtype=int)
    y = truth.values[:, cols] if cols.size else np.zeros((truth.values.shape[0], 0))
    return ObservationSet(operator=op, y=y)


def hard_mask(op: ObservationOperator, K: int) -> np.ndarray:
    """Binary ring mask, 1 exactly at observed positions."""
    if K != op.K:
        raise ValueError(f"K={K} does not match operator K={op.K}")
    mask = np.zeros(K)
    if op.column_indices:
        mask[list(op.column_indices)] = 1.0
    return mask


def softbleed(mask: np.ndarray, cfg: SoftbleedConfig) -> np.ndarray:
    """(max, x)-convolve the hard mask with an unnormalized Gaussian kernel.

    m_s[p] = max over |r| <= radius of exp(-r^2 / (2 sigma^2)) * m_h[p - r],
    with periodic wrap, so 1-valued points stay exactly 1.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 1:
        raise ValueError("hard mask must be 1-D over ring positions")
    offsets = np.arange(-cfg.radius, cfg.radius + 1)
    kernel = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * cfg.sigma_g**2))
    stacked = np.stack([kernel[i] * np.roll(mask, r) for i, r in enumerate(offsets)])
    return stacked.max(axis=0)


def interpolate(
    obs: ObservationSet,
    clim: ClimatologyStats,
    cfg: SoftbleedConfig,
    K: int,
) -> np.ndarray:
    """Fill the grid from observed anomalies, exact at observed points.

    Unobserved positions get the climatology mean plus a Gaussian-weighted
    average of the observed anomalies (periodic ring distance, width
    sigma_g); where all weights fall below cutoff the value is the
    climatology mean alone. Observed positions are overridden with the
    observed value exactly. An empty observation set yields the pure
    climatology field.
    """
    L = clim.mean.size
    field_values = np.tile(clim.mean[:, None], (1, K))
    if obs.is_empty():
        return field_values
    if obs.operator.K != K:
        raise ValueError(f"operator K={obs.operator.K} does not match K={K}")
    cols = np.array(obs.operator.column_indices, dtype=int)
    if obs.y.shape[0] != L:
        raise ValueError(f"y has {obs.y.shape[0]} levels, climatology has {L}")
    delta = np.abs(np.arange(K)[:, None] - cols[None, :])
    dist = np.minimum(delta, K - delta)
    weights = np.exp(-(dist.astype(np.float64) ** 2) / (2.0 * cfg.sigma_g**2))
    total = weights.sum(axis=1)
    covered = total >= WEIGHT_CUTOFF
    anomalies = obs.y - clim.mean[:, None]  # (L, n_cols)
    spread = anomalies @ weights.T  # (L, K)
    field_values[:, covered] = clim.mean[:, None] + spread[:, covered] / total[covered]
    field_values[:, cols] = obs.y
    return field_values
