"""Euler-Maruyama simulators used as ground truth.

Log-volatility is arithmetic Brownian motion, so it is stepped exactly.
Log-price is stepped in log space. ``vol[i]`` in every returned path is
the volatility driving the step that ends at grid point ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gpcv import VolatilityPath
from .timeseries import DAILY_DT, TimeSeries, make_grid


@dataclass(frozen=True)
class JointSDEParams:
    mu_s: float = 0.05
    sigma: float = 0.5
    V0: float = 0.2
    S0: float = 100.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.V0 <= 0 or self.S0 <= 0:
            raise ValueError("V0 and S0 must be positive")


@dataclass(frozen=True)
class SABRParams:
    """Log-normal SABR (beta = 1) with price/vol correlation ``rho``."""

    alpha: float = 0.6
    rho: float = 0.0
    V0: float = 0.2
    S0: float = 100.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        if self.V0 <= 0 or self.S0 <= 0:
            raise ValueError("V0 and S0 must be positive")


def _check(n, dt):
    if n < 1:
        raise ValueError("n must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be positive")


def joint_paths(params: JointSDEParams, n: int, dt: float, n_paths: int, seed=0):
    """Arrays ``(s, vol)`` of shape ``(n_paths, n)`` under the joint log SDE.

    ``ds = mu_s dt + V dW`` and ``dv = -sigma^2/2 dt + sigma dZ`` with
    independent ``W`` and ``Z``; ``s`` excludes the starting value.
    """
    _check(n, dt)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((2, n_paths, n))
    sig = params.sigma
    v_inc = -0.5 * sig ** 2 * dt + sig * np.sqrt(dt) * z[1]
    # volatility in effect over step i is exp(v(t_{i-1}))
    v_left = np.log(params.V0) + np.concatenate(
        [np.zeros((n_paths, 1)), np.cumsum(v_inc[:, :-1], axis=1)], axis=1)
    vol = np.exp(v_left)
    s = np.log(params.S0) + np.cumsum(params.mu_s * dt + vol * np.sqrt(dt) * z[0], axis=1)
    return s, vol


def log_price_paths(vol, mu_s: float, s0: float, dt: float, n_paths: int, seed=0):
    """Log-price paths driven by a fixed volatility path ``vol`` (length n)."""
    vol = np.asarray(vol, dtype=float)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_paths, len(vol)))
    return s0 + np.cumsum(mu_s * dt + vol * np.sqrt(dt) * z, axis=1)


def simulate_joint(params: JointSDEParams, n: int, dt: float = DAILY_DT, seed=0):
    """One path of ``(S, V)`` on the grid ``dt, ..., n dt``."""
    s, vol = joint_paths(params, n, dt, 1, seed)
    grid = make_grid(n, dt)
    series = TimeSeries(grid.times, np.exp(s[0]), dt=dt, label="joint")
    return series, VolatilityPath(grid.times, vol[0], "annualized", dt)


def _sabr_paths(params: SABRParams, chol, n: int, dt: float, n_paths: int, seed):
    rng = np.random.default_rng(seed)
    P = chol.shape[0]
    z = rng.standard_normal((2, n_paths, n, P))
    dz = z[1] @ chol.T
    dw = params.rho * dz + np.sqrt(1.0 - params.rho ** 2) * z[0]
    a = params.alpha
    v_inc = -0.5 * a ** 2 * dt + a * np.sqrt(dt) * dz
    v_left = np.log(params.V0) + np.concatenate(
        [np.zeros((n_paths, 1, P)), np.cumsum(v_inc[:, :-1], axis=1)], axis=1)
    vol = np.exp(v_left)
    s = np.log(params.S0) + np.cumsum(-0.5 * vol ** 2 * dt + vol * np.sqrt(dt) * dw, axis=1)
    return s, vol, dw, dz


def sabr_paths(params: SABRParams, n: int, dt: float, n_paths: int, seed=0):
    """Arrays ``(s, vol, dW, dZ)`` for single-asset SABR, shapes ``(n_paths, n)``."""
    _check(n, dt)
    s, vol, dw, dz = _sabr_paths(params, np.ones((1, 1)), n, dt, n_paths, seed)
    return s[..., 0], vol[..., 0], dw[..., 0], dz[..., 0]


def simulate_sabr(params: SABRParams, n: int, dt: float = DAILY_DT, seed=0):
    s, vol, _, _ = sabr_paths(params, n, dt, 1, seed)
    grid = make_grid(n, dt)
    series = TimeSeries(grid.times, np.exp(s[0]), dt=dt, label="sabr")
    return series, VolatilityPath(grid.times, vol[0], "annualized", dt)


def corr_sabr_paths(corr, params: SABRParams, n: int, dt: float, n_paths: int, seed=0):
    """Arrays of shape ``(n_paths, n, P)``; volatility noises correlated by ``corr``."""
    _check(n, dt)
    corr = np.asarray(corr, dtype=float)
    if corr.ndim != 2 or corr.shape[0] != corr.shape[1]:
        raise ValueError("correlation must be a square matrix")
    if not np.allclose(np.diag(corr), 1.0) or not np.allclose(corr, corr.T):
        raise ValueError("correlation must be symmetric with unit diagonal")
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise ValueError("correlation matrix is not positive definite") from None
    return _sabr_paths(params, chol, n, dt, n_paths, seed)


def simulate_corr_sabr(P: int, corr, params: SABRParams, n: int, dt: float = DAILY_DT, seed=0):
    """``P`` series whose log-volatilities are correlated; price noises independent."""
    corr = np.asarray(corr, dtype=float)
    if corr.shape != (P, P):
        raise ValueError(f"correlation must be {P}x{P}")
    s, vol, _, _ = corr_sabr_paths(corr, params, n, dt, 1, seed)
    grid = make_grid(n, dt)
    return [(TimeSeries(grid.times, np.exp(s[0, :, p]), dt=dt, label=f"task{p}"),
             VolatilityPath(grid.times, vol[0, :, p], "annualized", dt)) for p in range(P)]
