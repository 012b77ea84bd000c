"""RMSE metric and the flat scoreboard record format.

Every experiment emits a list of MetricsRecord rows that serialize to a
CSV with a fixed column order, so downstream tooling can pivot them into
scoreboard tables without per-experiment parsing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import GridState

CSV_COLUMNS = ("experiment", "case", "variable", "m_cols", "sigma_g", "index", "metric", "value")


def rmse(a, b, per_level: bool = False):
    """Root mean square difference, over everything or per level.

    Accepts GridState or bare (L, K) arrays.
    """
    av = a.values if isinstance(a, GridState) else np.asarray(a)
    bv = b.values if isinstance(b, GridState) else np.asarray(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    sq = (av - bv) ** 2
    if per_level:
        return np.sqrt(sq.mean(axis=tuple(range(1, sq.ndim))))
    return float(np.sqrt(sq.mean()))


@dataclass(frozen=True)
class MetricsRecord:
    """One scoreboard cell: an RMSE value with its full coordinates."""

    experiment: str
    case: int
    variable: str
    m_cols: int
    sigma_g: float
    index: int
    metric: str
    value: float

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError("RMSE values cannot be negative")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_csv(records: list[MetricsRecord]) -> str:
    """Render records with the stable header and column order, LF endings."""
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(",".join(_fmt(getattr(r, col)) for col in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def emit_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_csv(records))


def read_csv(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError(f"unexpected metrics CSV header in {path}")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        records.append(
            MetricsRecord(
                experiment=parts[0],
                case=int(parts[1]),
                variable=parts[2],
                m_cols=int(parts[3]),
                sigma_g=float(parts[4]),
                index=int(parts[5]),
                metric=parts[6],
                value=float(parts[7]),
            )
        )
    return records


def mean_value(records: list[MetricsRecord], **where) -> float:
    """Arithmetic mean of record values matching the given field filters."""
    selected = select(records, **where)
    if not selected:
        raise ValueError(f"no records match {where}")
    return float(np.mean([r.value for r in selected]))


def select(records: list[MetricsRecord], **where) -> list[MetricsRecord]:
    out = records
    for key, val in where.items():
        out = [r for r in out if getattr(r, key) == val]
    return out
