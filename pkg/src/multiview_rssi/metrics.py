"""Regression error statistics in dB, plus the empirical CDF of absolute error."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    """A correlation or R^2 requested on a zero-variance series."""


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} targets")
    if p.size == 0:
        raise ValueError("empty input")
    return p, y


def rmse(pred, target) -> float:
    p, y = _pair(pred, target)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def mae(pred, target) -> float:
    p, y = _pair(pred, target)
    return float(np.mean(np.abs(p - y)))


def pearson_r(a, b) -> float:
    a, b = _pair(a, b)
    if a.size < 2:
        raise UndefinedMetricError("correlation needs at least two samples")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("correlation undefined for a constant series")
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


def r_squared(pred, target) -> float:
    p, y = _pair(pred, target)
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0:
        raise UndefinedMetricError("R^2 undefined for constant targets")
    return float(1.0 - np.sum((y - p) ** 2) / sst)


def error_cdf(abs_errors) -> tuple[np.ndarray, np.ndarray]:
    """Sorted absolute errors and their cumulative fractions k/n."""
    e = np.sort(np.abs(np.asarray(abs_errors, dtype=np.float64).ravel()))
    if e.size == 0:
        raise ValueError("empty input")
    return e, np.arange(1, e.size + 1) / e.size


def cdf_coverage(abs_errors, threshold: float = 3.0):
    """Fraction of absolute errors at most ``threshold`` dB, and the CDF table."""
    e, frac = error_cdf(abs_errors)
    return float(np.count_nonzero(e <= threshold) / e.size), (e, frac)


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    pearson_r: float | None
    r_squared: float | None
    coverage: float
    threshold_db: float
    n: int
    cdf: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "rmse_db": self.rmse,
            "mae_db": self.mae,
            "pearson_r": self.pearson_r,
            "r_squared": self.r_squared,
            "coverage": self.coverage,
            "threshold_db": self.threshold_db,
            "n": self.n,
        }


def report(pred, target, threshold: float = 3.0) -> MetricsReport:
    p, y = _pair(pred, target)
    try:
        r = pearson_r(p, y)
    except UndefinedMetricError:
        r = None
    try:
        r2 = r_squared(p, y)
    except UndefinedMetricError:
        r2 = None
    cov, table = cdf_coverage(np.abs(p - y), threshold)
    return MetricsReport(rmse=rmse(p, y), mae=mae(p, y), pearson_r=r, r_squared=r2,
                         coverage=cov, threshold_db=threshold, n=int(p.size), cdf=table)


def write_cdf_csv(path, abs_errors) -> None:
    e, frac = error_cdf(abs_errors)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["abs_error_db", "cum_fraction"])
        for a, b in zip(e, frac):
            w.writerow([repr(float(a)), repr(float(b))])
