#!/usr/bin/env python3
"""Regression metrics, rank correlation, bootstrap intervals, station skill.

R2 = 1 - sum((y - yhat)^2) / sum((y - mean(y))^2)
RMSE = sqrt(sum((y - yhat)^2) / n)
NMAE = sum(|y - yhat|) / (n * mean(y))
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from records import TARGETS


logger = logging.getLogger(__name__)

CI_PERCENTILES = (2.5, 97.5)
DEFAULT_RESAMPLES = 1000
MAX_EXHAUSTIVE_TUPLES = 100_000


class MetricError(ValueError):
    """Raised when a metric is undefined for its inputs."""


def _pair(y: Sequence[float], yhat: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise MetricError(f"observations and estimates differ in length: {y.size} vs {yhat.size}")
    if y.size == 0:
        raise MetricError("metrics need at least one observation")
    if not (np.isfinite(y).all() and np.isfinite(yhat).all()):
        raise MetricError("metrics need finite observations and estimates")
    return y, yhat


def r2_score(y: Sequence[float], yhat: Sequence[float]) -> float:
    y, yhat = _pair(y, yhat)
    total = float(np.sum((y - y.mean()) ** 2))
    if total == 0.0:
        raise MetricError("R2 is undefined when observations have zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / total


def rmse(y: Sequence[float], yhat: Sequence[float]) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def nmae(y: Sequence[float], yhat: Sequence[float]) -> float:
    y, yhat = _pair(y, yhat)
    mean = float(y.mean())
    if mean == 0.0:
        raise MetricError("NMAE is undefined when the mean observation is zero")
    return float(np.sum(np.abs(y - yhat))) / (y.size * mean)


METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "r2": r2_score,
    "rmse": rmse,
    "nmae": nmae,
}


@dataclass(frozen=True)
class MetricsReport:
    r2: float
    rmse: float
    nmae: float
    n: int
    split: str = ""
    target: str = ""
    model: str = ""

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise MetricError("a metrics report needs n > 0")
        if self.rmse < 0 or self.nmae < 0 or self.r2 > 1.0 + 1e-12:
            raise MetricError(f"inconsistent metrics: r2={self.r2}, rmse={self.rmse}, nmae={self.nmae}")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(y: Sequence[float], yhat: Sequence[float], split: str = "", target: str = "",
                    model: str = "") -> MetricsReport:
    y, yhat = _pair(y, yhat)
    return MetricsReport(
        r2=r2_score(y, yhat),
        rmse=rmse(y, yhat),
        nmae=nmae(y, yhat),
        n=int(y.size),
        split=split,
        target=target,
        model=model,
    )


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise MetricError(f"spearman needs two equal-length vectors of length >= 2, got {a.size} and {b.size}")
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    ra -= ra.mean()
    rb -= rb.mean()
    denominator = float(np.sqrt(np.sum(ra * ra) * np.sum(rb * rb)))
    if denominator == 0.0:
        raise MetricError("spearman is undefined for a constant vector")
    return float(np.sum(ra * rb)) / denominator


@dataclass(frozen=True)
class BootstrapCI:
    metric: str
    point: float
    lower: float
    upper: float
    resamples: int
    seed: int
    unit: str = "observation"

    def to_dict(self) -> dict:
        return asdict(self)


def _resolve_metric(metric) -> tuple[str, Callable]:
    if callable(metric):
        return getattr(metric, "__name__", "metric"), metric
    if metric not in METRICS:
        raise MetricError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)}")
    return metric, METRICS[metric]


def percentile_interval(values: Sequence[float]) -> tuple[float, float]:
    lower, upper = np.percentile(np.asarray(values, dtype=np.float64), CI_PERCENTILES, method="linear")
    return float(lower), float(upper)


def exhaustive_values(y: np.ndarray, yhat: np.ndarray, fn: Callable) -> list[float]:
    """The metric on every one of the n^n equiprobable resamples where it is defined."""
    n = y.size
    if n ** n > MAX_EXHAUSTIVE_TUPLES:
        raise MetricError(f"exhaustive bootstrap over {n}^{n} resamples is too large")
    values = []
    for indices in itertools.product(range(n), repeat=n):
        index = np.asarray(indices)
        try:
            values.append(fn(y[index], yhat[index]))
        except MetricError:
            continue
    return values


def bootstrap_ci(y: Sequence[float], yhat: Sequence[float], metric="rmse", B: int = DEFAULT_RESAMPLES,
                 seed: int = 0, groups: Optional[Sequence] = None, exhaustive: bool = False) -> BootstrapCI:
    """Percentile interval over B resamples drawn with replacement.

    groups (for example the date of each observation) switches the
    resampling unit from single observations to whole groups. A resample on
    which the metric is undefined is redrawn; more than 10*B redraws is an
    error. exhaustive=True replaces random draws with every possible
    observation-level resample.
    """
    name, fn = _resolve_metric(metric)
    y, yhat = _pair(y, yhat)
    if B < 1:
        raise MetricError(f"B must be >= 1, got {B}")
    point = fn(y, yhat)

    if exhaustive:
        values = exhaustive_values(y, yhat, fn)
        if not values:
            raise MetricError(f"{name} is undefined on every resample")
        lower, upper = percentile_interval(values)
        return BootstrapCI(name, point, lower, upper, len(values), seed, "exhaustive")

    if groups is None:
        members = [np.array([i]) for i in range(y.size)]
        unit = "observation"
    else:
        groups = np.asarray(groups)
        if groups.shape[0] != y.size:
            raise MetricError("groups must label every observation")
        members = [np.flatnonzero(groups == key) for key in pd.unique(groups)]
        unit = "group"

    rng = np.random.default_rng(seed)
    values = []
    redraws = 0
    while len(values) < B:
        chosen = rng.integers(0, len(members), size=len(members))
        index = np.concatenate([members[i] for i in chosen])
        try:
            values.append(fn(y[index], yhat[index]))
        except MetricError:
            redraws += 1
            if redraws > 10 * B:
                raise MetricError(f"{name} undefined on more than {10 * B} resamples") from None
    lower, upper = percentile_interval(values)
    return BootstrapCI(name, point, lower, upper, B, seed, unit)


def station_mean_skill(frame: pd.DataFrame) -> tuple[float, pd.DataFrame]:
    """NMAE across stations of the per-station mean observation and mean estimate.

    frame columns: station_id, observed, estimated.
    """
    missing = {"station_id", "observed", "estimated"} - set(frame.columns)
    if missing:
        raise MetricError(f"station frame is missing columns: {sorted(missing)}")
    stations = pd.unique(frame["station_id"])
    usable = frame.dropna(subset=["observed", "estimated"])
    empty = sorted(set(stations) - set(usable["station_id"]))
    if empty or usable.empty:
        raise MetricError(f"stations without records: {empty or list(stations)}")
    means = usable.groupby("station_id", sort=True)[["observed", "estimated"]].mean()
    return nmae(means["observed"], means["estimated"]), means.reset_index()


def station_correlations(aq: pd.DataFrame, target: str, min_shared: int = 3) -> pd.DataFrame:
    """Pairwise Spearman rho between stations on the dates both measured `target`."""
    if target not in TARGETS:
        raise MetricError(f"unknown target {target!r}")
    wide = aq.pivot_table(index="date", columns="station_id", values=target, aggfunc="mean")
    rows = []
    for first, second in itertools.combinations(sorted(wide.columns), 2):
        shared = wide[[first, second]].dropna()
        rho = float("nan")
        if len(shared) >= min_shared:
            try:
                rho = spearman(shared[first], shared[second])
            except MetricError as exc:
                logger.warning(f"{target} {first}-{second}: {exc}")
        rows.append({"target": target, "station_a": first, "station_b": second,
                     "n_shared": len(shared), "spearman": rho})
    return pd.DataFrame(rows, columns=["target", "station_a", "station_b", "n_shared", "spearman"])


def target_correlations(aq: pd.DataFrame, min_shared: int = 3) -> pd.DataFrame:
    """Spearman rho between each pair of targets over station-days that measured both."""
    rows = []
    for first, second in itertools.combinations(TARGETS, 2):
        shared = aq[[first, second]].dropna()
        rho = float("nan")
        if len(shared) >= min_shared:
            try:
                rho = spearman(shared[first], shared[second])
            except MetricError as exc:
                logger.warning(f"{first}-{second}: {exc}")
        rows.append({"target_a": first, "target_b": second, "n_shared": len(shared), "spearman": rho})
    return pd.DataFrame(rows, columns=["target_a", "target_b", "n_shared", "spearman"])
