"""Forecast evaluation: quantiles, calibration, NLL and MAE.

Quantiles use the linear interpolation between order statistics
(``numpy.quantile`` with ``method="linear"``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

PERCENTILES = np.round(np.arange(1, 20) * 0.05, 2)
STEP_WINDOW = (75, 100)
VAR_FLOOR = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


def _samples(ensemble) -> np.ndarray:
    x = getattr(ensemble, "paths", ensemble)
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError("empty ensemble")
    return x


def quantile(ensemble, p: float, step: int | None = None):
    """Empirical ``p`` quantile at 1-based lookahead ``step`` (all steps if None)."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    x = _samples(ensemble)
    if x.ndim == 1:
        return float(np.quantile(x, p, method="linear"))
    if step is None:
        return np.quantile(x, p, axis=0, method="linear")
    if not 1 <= step <= x.shape[1]:
        raise ValueError(f"step {step} outside horizon 1..{x.shape[1]}")
    return float(np.quantile(x[:, step - 1], p, method="linear"))


@dataclass(frozen=True)
class CalibrationReport:
    """Coverage per percentile, aggregated over a window of lookahead steps."""

    grid: np.ndarray
    coverage: np.ndarray
    per_step: np.ndarray
    steps: tuple
    K: int
    nll: np.ndarray = field(default_factory=lambda: np.empty(0))
    mae: float = float("nan")

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("percentile grid must be strictly increasing")

    @property
    def calibration_error(self) -> float:
        return calibration_error(self)

    def summary(self) -> dict:
        n = len(self.nll)
        return {
            "calibration_error": self.calibration_error,
            "max_abs_deviation": float(np.max(np.abs(self.coverage - self.grid))),
            "nll_mean": float(np.mean(self.nll)) if n else None,
            "nll_se": float(np.std(self.nll, ddof=1) / np.sqrt(n)) if n > 1 else None,
            "mae": None if np.isnan(self.mae) else float(self.mae),
            "K": self.K,
            "step_window": list(self.steps),
        }

    def to_csv(self) -> str:
        window = f"{self.steps[0]}-{self.steps[1]}"
        rows = ["p,coverage,step_window"]
        rows += [f"{p:.2f},{c:.6f},{window}" for p, c in zip(self.grid, self.coverage)]
        return "\n".join(rows) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def calibration_curve(forecasts, truths, grid=PERCENTILES, steps=STEP_WINDOW) -> CalibrationReport:
    """Fraction of forecasts whose truth falls below the ``p`` quantile.

    ``truths[k]`` holds the realized path over the forecast horizon of
    ``forecasts[k]``; ``steps`` is an inclusive 1-based window of lookahead
    steps over which indicators are pooled.
    """
    forecasts, truths = list(forecasts), list(truths)
    if len(forecasts) != len(truths):
        raise ValueError(f"{len(forecasts)} forecasts but {len(truths)} truths")
    if not forecasts:
        raise ValueError("need at least one forecast")
    grid = np.asarray(grid, dtype=float)
    lo, hi = int(steps[0]), int(steps[1])
    if lo < 1 or hi < lo:
        raise ValueError("step window must satisfy 1 <= start <= end")
    hits = []
    for ens, truth in zip(forecasts, truths):
        x = _samples(ens)
        truth = np.atleast_1d(np.asarray(truth, dtype=float))
        if x.ndim == 1:
            x = x[:, None]
        if hi > x.shape[1] or len(truth) < hi:
            raise ValueError(f"step window {lo}-{hi} exceeds the forecast horizon")
        q = np.quantile(x[:, lo - 1:hi], grid, axis=0, method="linear")
        hits.append(truth[lo - 1:hi][None, :] < q)
    hits = np.stack(hits)
    per_step = hits.mean(axis=0).T
    return CalibrationReport(grid, hits.mean(axis=(0, 2)), per_step, (lo, hi), len(forecasts))


def calibration_error(report: CalibrationReport) -> float:
    """Mean over the percentile grid of ``(C_p - p)^2``."""
    return float(np.mean((report.coverage - report.grid) ** 2))


def _log_samples(ensemble) -> np.ndarray:
    if hasattr(ensemble, "log_paths"):
        return np.asarray(ensemble.log_paths, dtype=float)
    return np.log(_samples(ensemble))


def nll(ensemble, truth, space: str = "log", method: str = "moment", bandwidth=None):
    """Negative log likelihood of ``truth`` under the ensemble, per step.

    ``method="moment"`` fits a Gaussian to the log-space samples (variance
    floored at 1e-8); ``method="kde"`` uses a Gaussian kernel density over
    the log samples with Silverman's bandwidth. ``space="raw"`` scores the
    data-space value, adding ``log(truth)`` for the change of variables.
    """
    if space not in ("log", "raw"):
        raise ValueError("space must be 'log' or 'raw'")
    truth = np.asarray(truth, dtype=float)
    if not np.all(np.isfinite(truth)):
        raise ValueError("truth must be finite")
    if np.any(truth <= 0):
        raise ValueError("truth must be positive to be scored in log space")
    shift = float(getattr(ensemble, "shift", 0.0))
    logs = _log_samples(ensemble)
    y = np.log(truth + shift)
    if logs.ndim == 1:
        logs = logs[:, None]
    if method == "moment":
        mu = logs.mean(axis=0)
        var = np.maximum(logs.var(axis=0), VAR_FLOOR)
        out = 0.5 * (LOG_2PI + np.log(var) + (y - mu) ** 2 / var)
    elif method == "kde":
        n = logs.shape[0]
        h = bandwidth
        if h is None:
            h = 1.06 * np.maximum(logs.std(axis=0), np.sqrt(VAR_FLOOR)) * n ** (-0.2)
        z = (y - logs) / h
        out = -(logsumexp(-0.5 * z ** 2, axis=0) - np.log(n) - np.log(h) - 0.5 * LOG_2PI)
    else:
        raise ValueError("method must be 'moment' or 'kde'")
    if space == "raw":
        out = out + np.log(truth + shift)
    out = np.asarray(out)
    return float(out.ravel()[0]) if out.size == 1 and truth.ndim == 0 else out


def mae(ensemble, truth) -> float:
    """Mean absolute error of the ensemble mean against ``truth`` over the steps."""
    x = _samples(ensemble)
    truth = np.asarray(truth, dtype=float)
    mean = x.mean(axis=0)
    return float(np.mean(np.abs(mean - truth)))


def evaluate(forecasts, truths, grid=PERCENTILES, steps=STEP_WINDOW, space: str = "log",
             method: str = "moment") -> CalibrationReport:
    """Calibration plus per-forecast NLL and MAE over the same step window."""
    report = calibration_curve(forecasts, truths, grid, steps)
    lo, hi = report.steps
    nlls, maes = [], []
    for ens, truth in zip(forecasts, truths):
        truth = np.atleast_1d(np.asarray(truth, dtype=float))
        window = slice(lo - 1, hi)
        x = _samples(ens)
        x = x[:, None] if x.ndim == 1 else x
        sub = _Window(ens, window)
        nlls.append(float(np.mean(nll(sub, truth[window], space, method))))
        maes.append(mae(x[:, window], truth[window]))
    return CalibrationReport(report.grid, report.coverage, report.per_step, report.steps,
                             report.K, np.array(nlls), float(np.mean(maes)))


class _Window:
    """Column slice of an ensemble that keeps its log paths and shift."""

    def __init__(self, ensemble, window):
        logs = _log_samples(ensemble)
        logs = logs[:, None] if logs.ndim == 1 else logs
        self.log_paths = logs[:, window]
        self.shift = float(getattr(ensemble, "shift", 0.0))
        self.paths = np.exp(self.log_paths) - self.shift
