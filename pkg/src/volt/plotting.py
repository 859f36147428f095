"""Static figures for CLI reports: forecast fans, calibration curves, volatility."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (7.0, 4.0)
FAN_BANDS = ((0.05, 0.95), (0.25, 0.75))


def _save(fig, path):
    # no software/date metadata, so identical inputs give identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def fan_chart(path, times, quantiles: dict, history=None, truth=None, title: str = ""):
    """Shaded quantile bands keyed by probability, median line, optional history and truth.

    ``history`` is ``(times, values)``; ``truth`` is aligned with ``times``.
    """
    fig, ax = plt.subplots(figsize=FIGSIZE)
    if history is not None:
        ax.plot(history[0], history[1], color="k", lw=0.8, label="history")
    for (lo, hi), alpha in zip(FAN_BANDS, (0.2, 0.35)):
        if lo in quantiles and hi in quantiles:
            ax.fill_between(times, quantiles[lo], quantiles[hi], color="C0", alpha=alpha,
                            lw=0, label=f"{int(lo * 100)}-{int(hi * 100)}%")
    if 0.5 in quantiles:
        ax.plot(times, quantiles[0.5], color="C0", lw=1.2, label="median")
    if truth is not None:
        ax.plot(times, truth, color="C3", lw=0.8, label="truth")
    ax.set_xlabel("time (years)")
    ax.set_ylabel("value")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def calibration_plot(path, grid, coverage, label: str = "forecast", title: str = ""):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot([0, 1], [0, 1], color="0.6", ls="--", lw=0.8, label="ideal")
    ax.plot(grid, coverage, marker="o", ms=3, label=label)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("percentile p")
    ax.set_ylabel("coverage $C_p$")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def vol_plot(path, times, estimate, truth=None, title: str = ""):
    """Annualized volatility estimate, optionally against the true path."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(times, estimate, color="C0", lw=1.0, label="estimate")
    if truth is not None:
        ax.plot(times, np.asarray(truth), color="k", lw=0.8, alpha=0.7, label="truth")
    ax.set_xlabel("time (years)")
    ax.set_ylabel("annualized volatility")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8, frameon=False)
    fig.tight_layout()
    return _save(fig, path)
