"""Distributional metrics and the sweep report container.

Energy distance is the two-sample statistic used in place of any learned
video metric: it is exact at toy scale and needs no feature network.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

REPORT_COLUMNS = (
    "scheme",
    "omega",
    "k_h",
    "mean_error",
    "cov_error",
    "energy_distance",
    "sample_variance",
    "rollout_divergence_step",
)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased-flavor energy statistic 2 E|X-Y| - E|X-X'| - E|Y-Y'|.

    Inputs are (n, ...) sample arrays, flattened per sample.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    d_xy = cdist(x, y).mean()
    d_xx = _offdiag_mean(cdist(x, x))
    d_yy = _offdiag_mean(cdist(y, y))
    return 2.0 * d_xy - d_xx - d_yy


def _offdiag_mean(d: np.ndarray) -> float:
    n = d.shape[0]
    if n < 2:
        return 0.0
    return (d.sum() - np.trace(d)) / (n * (n - 1))


def mean_error(samples: np.ndarray, mean_ref: np.ndarray) -> float:
    """Largest absolute coordinate error of the empirical mean."""
    emp = samples.reshape(len(samples), -1).mean(axis=0)
    return float(np.abs(emp - np.asarray(mean_ref).reshape(-1)).max())


def cov_error(samples: np.ndarray, cov_ref: np.ndarray) -> float:
    """Relative Frobenius error of the empirical covariance."""
    flat = samples.reshape(len(samples), -1)
    emp = np.cov(flat, rowvar=False).reshape(cov_ref.shape)
    denom = np.linalg.norm(cov_ref)
    if denom == 0:
        return float(np.linalg.norm(emp - cov_ref))
    return float(np.linalg.norm(emp - cov_ref) / denom)


def sample_variance(samples: np.ndarray) -> float:
    """Mean per-coordinate variance of a sample set."""
    flat = samples.reshape(len(samples), -1)
    return float(flat.var(axis=0, ddof=1).mean())


@dataclass
class MetricReport:
    """Rows of per-configuration metrics with a fixed CSV schema."""

    rows: list[dict] = field(default_factory=list)

    def add(self, **kwargs) -> dict:
        row = {col: kwargs.get(col) for col in REPORT_COLUMNS}
        extra = set(kwargs) - set(REPORT_COLUMNS)
        if extra:
            raise ValueError(f"unknown report columns: {sorted(extra)}")
        for col, val in row.items():
            if isinstance(val, float) and not math.isfinite(val):
                raise ValueError(f"non-finite metric {col}={val}")
        self.rows.append(row)
        return row

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        report = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                parsed = {}
                for col in REPORT_COLUMNS:
                    val = row.get(col, "")
                    if val == "" or val is None:
                        parsed[col] = None
                    elif col == "scheme":
                        parsed[col] = val
                    else:
                        parsed[col] = float(val)
                report.rows.append(parsed)
        return report
