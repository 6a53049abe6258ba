"""Regression metrics and split aggregation.

SMAPE uses the symmetric form 100 * mean(2|y - yhat| / (|y| + |yhat|)) with
0/0 terms counted as 0, so it ranges over [0, 200]. R2 takes the mean of
the evaluated actuals for the total sum of squares and can be negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConstantActuals, ConstantInput, EmptyInput

METRICS = ("RMSE", "MAE", "R2", "Spearman", "SMAPE")
SMAPE_DEFINITION = "100 * mean(2|y - yhat| / (|y| + |yhat|)), 0/0 terms = 0"


def _pair(y, yhat, min_len: int = 1):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch {y.shape} vs {yhat.shape}")
    if y.size < min_len:
        raise EmptyInput(f"need at least {min_len} values, got {y.size}")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def r2(y, yhat) -> float:
    y, yhat = _pair(y, yhat, min_len=2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise ConstantActuals("R2 undefined for constant actuals")
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


def spearman(y, yhat) -> float:
    """Pearson correlation of tie-averaged ranks."""
    y, yhat = _pair(y, yhat, min_len=2)
    ry = rankdata(y) - (y.size + 1) / 2.0
    rh = rankdata(yhat) - (y.size + 1) / 2.0
    den = math.sqrt(float(np.sum(ry * ry)) * float(np.sum(rh * rh)))
    if den == 0:
        raise ConstantInput("Spearman undefined when either input is constant")
    return float(np.clip(np.sum(ry * rh) / den, -1.0, 1.0))


def smape(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    den = np.abs(y) + np.abs(yhat)
    num = 2.0 * np.abs(y - yhat)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(100.0 * np.mean(terms))


METRIC_FUNCS = {"RMSE": rmse, "MAE": mae, "R2": r2, "Spearman": spearman, "SMAPE": smape}


def score(y, yhat) -> dict[str, float]:
    """All five metrics; an undefined metric is reported as NaN."""
    out = {}
    for name, fn in METRIC_FUNCS.items():
        try:
            out[name] = fn(y, yhat)
        except (ConstantActuals, ConstantInput, EmptyInput):
            out[name] = float("nan")
    return out


@dataclass(frozen=True)
class MetricsRow:
    model: str
    task: str
    metric: str
    split_values: tuple[float | None, ...]
    mean: float
    sd: float

    @property
    def present(self) -> list[float]:
        return [v for v in self.split_values if v is not None and not math.isnan(v)]


def aggregate_splits(values: Sequence[float | None]) -> tuple[float, float]:
    """Sample mean and sample (n - 1) sd over the splits that have a value."""
    v = np.array([x for x in values if x is not None and not math.isnan(x)], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


def make_row(model: str, task: str, metric: str, values: Sequence[float | None]) -> MetricsRow:
    mean, sd = aggregate_splits(values)
    return MetricsRow(model, task, metric, tuple(values), mean, sd)


def format_cell(row: MetricsRow, digits: int = 4) -> str:
    """``mean ± sd`` table cell."""
    return f"{row.mean:.{digits}f} ± {row.sd:.{digits}f}"
