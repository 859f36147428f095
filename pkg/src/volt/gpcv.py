"""Gaussian-process copula volatility (GPCV) by variational inference.

Log returns are modelled as ``w(t) ~ N(0, exp(2 f(t)))`` with a latent
``f ~ GP(c - t sigma2 / 2, sigma2 * min(t, t'))``. The variational posterior
``q(u) = N(m, S)`` has its inducing points at the return times, so
``q(f) = q(u)`` on the training grid.

The Brownian prior has a bidiagonal inverse Cholesky factor, so the KL term
and its gradients cost O(T^2) per step instead of O(T^3).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .gp import Adam, FitError, psd_sqrt
from .kernels import (BrownianKernel, GeodesicKernel, IntertaskCovariance, cov_to_corr,
                      jittered_cholesky, lkj_log_prior)
from .timeseries import ReturnSeries

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
STD_WINDOW = 21
STD_FLOOR = 1e-8
LOG_SIGMA2_BOUNDS = (np.log(1e-6), np.log(1e2))
SIGMA2_INIT = 1.0
N_VOL_SAMPLES = 64
_EXP_CAP = 700.0


# -- likelihood ---------------------------------------------------------------

def expected_loglik(mu, var, w):
    """``E[log N(w; 0, exp(2 f))]`` for ``f ~ N(mu, var)``, in closed form."""
    mu, var, w = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, var, w)))
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    expo = np.minimum(-2.0 * mu + 2.0 * var, _EXP_CAP)
    out = -0.5 * LOG_2PI - mu - 0.5 * w ** 2 * np.exp(expo)
    return float(out) if out.ndim == 0 else out


def _expected_loglik_grads(mu, var, w):
    """Value and derivatives with respect to ``mu`` and ``var``."""
    q = w ** 2 * np.exp(np.minimum(-2.0 * mu + 2.0 * var, _EXP_CAP))
    value = -0.5 * LOG_2PI - mu - 0.5 * q
    return value, -1.0 + q, -q


# -- Brownian prior helpers ------------------------------------------------------

class _BrownianFactor:
    """``min(t_i, t_j) = A A^T``; applies ``A^{-1}`` and ``A^{-T}`` in O(T)."""

    def __init__(self, times):
        times = np.asarray(times, dtype=float)
        if np.any(times <= 0) or np.any(np.diff(times) <= 0):
            raise ValueError("times must be positive and increasing")
        self.times = times
        self.delta = np.diff(times, prepend=0.0)
        self.rs = 1.0 / np.sqrt(self.delta)
        self.logdet = float(np.sum(np.log(self.delta)))

    def solve_a(self, x):
        """``A^{-1} x`` along axis 0."""
        d = np.diff(x, axis=0, prepend=np.zeros((1,) + x.shape[1:]))
        return d * self.rs.reshape((-1,) + (1,) * (x.ndim - 1))

    def solve_at(self, y):
        """``A^{-T} y`` along axis 0."""
        z = y * self.rs.reshape((-1,) + (1,) * (y.ndim - 1))
        out = z.copy()
        out[:-1] -= z[1:]
        return out

    def kinv(self, x):
        """``min(t, t')^{-1} x``."""
        return self.solve_at(self.solve_a(x))


# -- model ----------------------------------------------------------------------

@dataclass(frozen=True)
class GPCVModel:
    times: np.ndarray
    m: np.ndarray
    L: np.ndarray
    c: float
    sigma2: float
    dt: float

    def __post_init__(self):
        T = len(self.times)
        if self.m.shape != (T,) or self.L.shape != (T, T):
            raise ValueError("variational parameters do not match the time grid")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")

    @property
    def S(self) -> np.ndarray:
        return self.L @ self.L.T

    def prior_mean(self, times=None) -> np.ndarray:
        t = self.times if times is None else np.asarray(times, dtype=float)
        return self.c - t * self.sigma2 / 2.0

    def marginals(self):
        return self.m, np.sum(self.L ** 2, axis=1)


@dataclass(frozen=True)
class VolatilityPath:
    times: np.ndarray
    values: np.ndarray
    unit: str
    dt: float
    J: int = 0

    def __post_init__(self):
        if self.unit not in ("per-step", "annualized"):
            raise ValueError("unit must be 'per-step' or 'annualized'")
        values = np.asarray(self.values, dtype=float)
        if not np.all(values > 0):
            raise ValueError("volatility must be strictly positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))


def kl_divergence(m, L, mu, sigma2, factor: _BrownianFactor):
    """``KL(N(m, L L^T) || N(mu, sigma2 min(t, t')))``."""
    T = len(m)
    a = np.sum(factor.solve_a(L) ** 2)
    b = np.sum(factor.solve_a(m - mu) ** 2)
    logdet_k = T * np.log(sigma2) + factor.logdet
    logdet_s = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    return 0.5 * ((a + b) / sigma2 - T + logdet_k - logdet_s)


def elbo_and_grad(model: GPCVModel, returns):
    """ELBO and gradients for ``m``, ``L`` (lower triangle), ``c`` and ``sigma2``."""
    w = np.asarray(getattr(returns, "returns", returns), dtype=float)
    if len(w) != len(model.m):
        raise ValueError("model and returns have different lengths")
    factor = _BrownianFactor(model.times)
    T, s2, L = len(w), model.sigma2, model.L
    var = np.sum(L ** 2, axis=1)
    ell, d_mu, d_var = _expected_loglik_grads(model.m, var, w)

    resid = model.m - model.prior_mean()
    AL = factor.solve_a(L)
    Ar = factor.solve_a(resid)
    a, b = np.sum(AL ** 2), np.sum(Ar ** 2)
    diagL = np.diag(L)
    kl = 0.5 * ((a + b) / s2 - T + T * np.log(s2) + factor.logdet
                - 2.0 * np.sum(np.log(np.abs(diagL))))

    kinv_r = factor.solve_at(Ar) / s2
    g_m = d_mu - kinv_r
    g_L = np.tril(2.0 * d_var[:, None] * L - factor.solve_at(AL) / s2)
    g_L[np.diag_indices(T)] += 1.0 / diagL
    g_c = np.sum(kinv_r)
    g_s2 = -0.5 * (-(a + b) / s2 ** 2 + T / s2) - np.sum(kinv_r * model.times) / 2.0
    value = float(np.sum(ell) - kl)
    return value, {"m": g_m, "L": g_L, "c": float(g_c), "sigma2": float(g_s2)}


def elbo(model: GPCVModel, returns) -> float:
    return elbo_and_grad(model, returns)[0]


def elbo_objective(model: GPCVModel, returns):
    """Flat ``(m, tril(L), c, sigma2)`` wrapper around :func:`elbo_and_grad`.

    Returns ``(objective, params)`` in the form :func:`volt.gp.grad_check` takes.
    """
    T = len(model.m)
    tril = np.tril_indices(T)

    def unpack(vec):
        L = np.zeros((T, T))
        L[tril] = vec[T:-2]
        return GPCVModel(model.times, vec[:T], L, float(vec[-2]), float(vec[-1]), model.dt)

    def objective(vec):
        value, g = elbo_and_grad(unpack(np.asarray(vec, dtype=float)), returns)
        return value, np.concatenate([g["m"], g["L"][tril], [g["c"], g["sigma2"]]])

    return objective, np.concatenate([model.m, model.L[tril], [model.c, model.sigma2]])


# -- initialization --------------------------------------------------------------

def running_log_std(w, window: int = STD_WINDOW, floor: float = STD_FLOOR) -> np.ndarray:
    """Log of the trailing standard deviation; the first point borrows the second."""
    w = np.asarray(w, dtype=float)
    if len(w) < 2:
        raise ValueError("need at least two returns")
    out = np.empty(len(w))
    for i in range(len(w)):
        lo = max(0, i - window + 1)
        seg = w[lo:max(i + 1, 2)]
        out[i] = np.log(max(np.std(seg, ddof=1), floor))
    return out


def init_variational(returns: ReturnSeries, sigma2: float = SIGMA2_INIT):
    """Initial ``(m0, S0)``: log running std and the Laplace-style covariance.

    ``S0 = K (K + K Sigma_y K)^{-1} K = (K^{-1} + Sigma_y)^{-1}`` where
    ``Sigma_y`` is the negative Hessian of the log likelihood at ``m0``.
    """
    w = np.asarray(returns.returns, dtype=float)
    if len(w) < 2:
        raise ValueError("need at least two returns")
    m0 = running_log_std(w)
    factor = _BrownianFactor(returns.times)
    sigma_y = 2.0 * w ** 2 * np.exp(-2.0 * m0)
    precision = factor.kinv(np.eye(len(w))) / sigma2 + np.diag(sigma_y)
    S0 = np.linalg.inv(precision)
    return m0, 0.5 * (S0 + S0.T)


def initial_model(returns: ReturnSeries, sigma2: float = SIGMA2_INIT) -> GPCVModel:
    m0, S0 = init_variational(returns, sigma2)
    times = np.asarray(returns.times, dtype=float)
    c = float(np.mean(m0 + times * sigma2 / 2.0))
    return GPCVModel(times, m0, jittered_cholesky(S0), c, sigma2, returns.dt)


# -- fitting -------------------------------------------------------------------------

class _Sites:
    """Gaussian sites ``q(f) ~ p(f) prod_i N(f_i; .)`` held as natural parameters.

    The optimal variational covariance has the form ``(K^{-1} + diag(lam))^{-1}``,
    a tridiagonal precision under the Brownian prior, so every update is
    banded.
    """

    def __init__(self, factor: _BrownianFactor):
        self.factor = factor
        rs2 = factor.rs ** 2
        self.k0_diag = rs2 + np.append(rs2[1:], 0.0)
        self.k0_off = -rs2[1:]

    def _factor(self, lam, sigma2):
        band = np.zeros((2, len(lam)))
        band[0, 1:] = self.k0_off / sigma2
        band[1] = self.k0_diag / sigma2 + lam
        return cholesky_banded(band)

    def moments(self, lam, eta, mu, sigma2):
        """Mean, tridiagonal band ``(diag, superdiag)`` of ``S`` and ``log det S``."""
        chol = self._factor(lam, sigma2)
        m = cho_solve_banded((chol, False), self.factor.kinv(mu) / sigma2 + eta)
        diag, sup = tridiagonal_inverse_band(chol)
        return m, diag, sup, -2.0 * float(np.sum(np.log(chol[1])))

    def covariance(self, lam, sigma2):
        chol = self._factor(lam, sigma2)
        S = cho_solve_banded((chol, False), np.eye(len(lam)))
        return 0.5 * (S + S.T)

    def trace_k0inv(self, diag, sup):
        """``tr(min(t, t')^{-1} S)`` from the tridiagonal band of ``S``."""
        return float(self.k0_diag @ diag + 2.0 * self.k0_off @ sup)


def tridiagonal_inverse_band(chol):
    """Diagonal and superdiagonal of ``P^{-1}`` from the banded upper factor of ``P``.

    With ``P = U^T U`` and ``U`` upper bidiagonal, the backward recursion
    ``S[i, i+1] = -(e_i / u_i) S[i+1, i+1]``,
    ``S[i, i] = 1 / u_i^2 - (e_i / u_i) S[i, i+1]`` is O(T).
    """
    u = chol[1].tolist()
    e = chol[0, 1:].tolist()
    T = len(u)
    diag = [0.0] * T
    sup = [0.0] * (T - 1)
    diag[-1] = 1.0 / u[-1] ** 2
    for i in range(T - 2, -1, -1):
        r = e[i] / u[i]
        sup[i] = -r * diag[i + 1]
        diag[i] = 1.0 / u[i] ** 2 - r * sup[i]
    return np.array(diag), np.array(sup)


def _objective(m, S_diag, trace_a, logdet_s, w, mu, sigma2, times, factor):
    """ELBO plus its derivatives for ``c`` and ``sigma2`` with ``q`` held fixed."""
    T = len(w)
    ell, d_mu, d_var = _expected_loglik_grads(m, S_diag, w)
    Ar = factor.solve_a(m - mu)
    b = float(Ar @ Ar)
    kl = 0.5 * ((trace_a + b) / sigma2 - T + T * np.log(sigma2) + factor.logdet - logdet_s)
    kinv_r = factor.solve_at(Ar) / sigma2
    g_c = float(np.sum(kinv_r))
    g_s2 = float(-0.5 * (-(trace_a + b) / sigma2 ** 2 + T / sigma2) - np.sum(kinv_r * times) / 2.0)
    return float(np.sum(ell) - kl), g_c, g_s2, d_mu, d_var


def fit(returns: ReturnSeries, steps: int = 500, lr: float = 0.1,
        sigma2_init: float = SIGMA2_INIT):
    """Maximize the ELBO; returns ``(model, elbo_trace)``.

    The variational distribution moves by natural-gradient site updates with
    step ``lr``; the prior constants ``c`` and ``log sigma2`` move by Adam
    with the same learning rate. ``steps=0`` returns the initialization.
    """
    w = np.asarray(returns.returns, dtype=float)
    times = np.asarray(returns.times, dtype=float)
    model = initial_model(returns, sigma2_init)
    if steps <= 0:
        return model, []
    factor = _BrownianFactor(times)
    sites = _Sites(factor)
    c, sigma2 = model.c, model.sigma2
    mu = c - times * sigma2 / 2.0
    lam = 2.0 * w ** 2 * np.exp(-2.0 * model.m)
    precision_m = factor.kinv(model.m) / sigma2 + lam * model.m
    eta = precision_m - factor.kinv(mu) / sigma2
    hyper = np.array([c, np.log(sigma2)])
    opt = Adam(lr=lr)
    trace = []
    for _ in range(steps + 1):
        c, sigma2 = float(hyper[0]), float(np.exp(hyper[1]))
        mu = c - times * sigma2 / 2.0
        m, S_diag, S_sup, logdet_s = sites.moments(lam, eta, mu, sigma2)
        value, g_c, g_s2, d_mu, d_var = _objective(
            m, S_diag, sites.trace_k0inv(S_diag, S_sup), logdet_s, w, mu, sigma2, times, factor)
        if not np.isfinite(value):
            raise FitError("non-finite ELBO during GPCV fit")
        trace.append(value)
        if len(trace) > steps:
            break
        lam = (1.0 - lr) * lam + lr * (-2.0 * d_var)
        eta = (1.0 - lr) * eta + lr * (d_mu - 2.0 * d_var * m)
        hyper = opt.step(hyper, np.array([g_c, g_s2 * sigma2]))
        # zero returns leave the likelihood unbounded; keep sigma2 in a sane range
        hyper[1] = np.clip(hyper[1], *LOG_SIGMA2_BOUNDS)
    S = sites.covariance(lam, sigma2)
    final = GPCVModel(times, m, jittered_cholesky(S), c, sigma2, returns.dt)
    return final, trace


# -- volatility estimates -------------------------------------------------------------

def latent_posterior(model: GPCVModel, times=None):
    """Mean and covariance of ``q(f)`` at ``times`` (defaults to the training grid)."""
    if times is None:
        return model.m.copy(), model.S
    times = np.asarray(times, dtype=float)
    k = BrownianKernel(model.sigma2)
    factor = _BrownianFactor(model.times)
    Kfu = k(times, model.times)
    # A = K_fu K_uu^{-1}
    A = factor.kinv(Kfu.T).T / model.sigma2
    mean = model.prior_mean(times) + A @ (model.m - model.prior_mean())
    cov = k(times) - A @ Kfu.T + (A @ model.L) @ (A @ model.L).T
    return mean, 0.5 * (cov + cov.T)


def estimate_vol(model: GPCVModel, grid=None, J: int = N_VOL_SAMPLES, seed=0) -> VolatilityPath:
    """Average of ``exp(f_j)`` over ``J`` posterior draws; per-step units."""
    if J < 1:
        raise ValueError("J must be >= 1")
    rng = np.random.default_rng(seed)
    times = model.times if grid is None else np.asarray(getattr(grid, "times", grid), dtype=float)
    if grid is None:
        draws = model.m[:, None] + model.L @ rng.standard_normal((len(times), J))
    else:
        mean, cov = latent_posterior(model, times)
        draws = mean[:, None] + psd_sqrt(cov) @ rng.standard_normal((len(times), J))
    values = np.maximum(np.mean(np.exp(draws), axis=1), STD_FLOOR)
    return VolatilityPath(times, values, "per-step", model.dt, J)


def annualize(vol: VolatilityPath, dt: float) -> VolatilityPath:
    if vol.unit != "per-step":
        raise ValueError("volatility path is already annualized")
    if dt <= 0:
        raise ValueError("dt must be positive")
    return replace(vol, values=vol.values / np.sqrt(dt), unit="annualized")


# -- multi-task ---------------------------------------------------------------------
#
# Latent panel F (P x T), task-major. Prior: vec F ~ N(mu, K_P kron sigma2 K0)
# with K0 = min(t, t') and mu[p, t] = c_p - t sigma2 K_P[p, p] / 2.
# Variational: q = N(vec M, S_P kron S_T).

LKJ_ETA = 5.0
_SHRINK = 0.05


def kron_qf_moments(Kff, Kfu, Kuu, m, S_time, S_task, K_task):
    """Moments of ``q(f)`` for a Kronecker prior ``K_time kron K_task``.

    Ordering is time-major: ``m`` stacks the task vectors of each inducing
    time. Mean ``(Kfu Kuu^{-1} kron I) m``; covariance
    ``(Kff - Kfu Kuu^{-1} Kuf) kron K_task + (Kfu Kuu^{-1} S_time Kuu^{-1} Kuf) kron S_task``.
    """
    A = np.linalg.solve(Kuu, np.asarray(Kfu, dtype=float).T).T
    P = K_task.shape[0]
    M = np.asarray(m, dtype=float).reshape(-1, P)
    mean = (A @ M).ravel()
    cov = np.kron(Kff - A @ Kfu.T, K_task) + np.kron(A @ S_time @ A.T, S_task)
    return mean, 0.5 * (cov + cov.T)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class MTGPCVModel:
    """Fitted multi-task GPCV. ``intertask`` is an :class:`IntertaskCovariance`
    (free form, ``sigma2`` fixed at 1) or a :class:`GeodesicKernel` over
    ``coords``."""

    times: np.ndarray
    M: np.ndarray
    L_T: np.ndarray
    L_P: np.ndarray
    c: np.ndarray
    sigma2: float
    intertask: object
    dt: float
    coords: np.ndarray | None = None
    eta: float = LKJ_ETA

    @property
    def n_tasks(self) -> int:
        return self.M.shape[0]

    @property
    def K_P(self) -> np.ndarray:
        if isinstance(self.intertask, GeodesicKernel):
            return self.intertask.matrix(self.coords)
        return self.intertask.matrix()

    @property
    def S_T(self) -> np.ndarray:
        return self.L_T @ self.L_T.T

    @property
    def S_P(self) -> np.ndarray:
        return self.L_P @ self.L_P.T

    def prior_mean(self) -> np.ndarray:
        return self.c[:, None] - np.outer(np.diag(self.K_P), self.times) * self.sigma2 / 2.0

    def marginals(self):
        return self.M, np.outer(np.sum(self.L_P ** 2, axis=1), np.sum(self.L_T ** 2, axis=1))

    def task(self, p: int) -> GPCVModel:
        """Marginal single-task view of task ``p``."""
        L = np.sqrt(self.S_P[p, p]) * self.L_T
        return GPCVModel(self.times, self.M[p].copy(), L, float(self.c[p]),
                         float(self.sigma2 * self.K_P[p, p]), self.dt)


def _panel(returns):
    """Stack a sequence of :class:`ReturnSeries` on a shared grid."""
    returns = list(returns)
    if not returns:
        raise ValueError("empty panel")
    times = np.asarray(returns[0].times, dtype=float)
    for r in returns[1:]:
        if len(r.times) != len(times) or not np.allclose(r.times, times):
            raise ValueError("panel series must share one time grid")
    W = np.vstack([np.asarray(r.returns, dtype=float) for r in returns])
    if not np.all(np.isfinite(W)):
        raise ValueError("panel has missing or non-finite entries")
    return times, W, returns[0].dt


def _kl_parts(R, S_P, S_T, K_P, sigma2, factor):
    """Pieces of the Kronecker KL that the value and its gradients share."""
    KPinv = np.linalg.inv(K_P)
    tau_P = float(np.sum(KPinv * S_P))
    tau_T = float(np.trace(factor.kinv(S_T)))
    R_K0inv = factor.kinv(R.T).T
    quad = float(np.sum((KPinv @ R) * R_K0inv))
    return KPinv, tau_P, tau_T, R_K0inv, quad


def mt_elbo(model: MTGPCVModel, returns) -> float:
    """Multi-task ELBO, including the LKJ log-prior for a free-form intertask matrix."""
    W = returns if isinstance(returns, np.ndarray) else _panel(returns)[1]
    factor = _BrownianFactor(model.times)
    P, T = model.M.shape
    K_P, S_P, S_T, s2 = model.K_P, model.S_P, model.S_T, model.sigma2
    mean, var = model.marginals()
    ell = np.sum(expected_loglik(mean, var, W))
    R = model.M - model.prior_mean()
    _, tau_P, tau_T, _, quad = _kl_parts(R, S_P, S_T, K_P, s2, factor)
    logdet_sp = 2.0 * np.sum(np.log(np.abs(np.diag(model.L_P))))
    logdet_st = 2.0 * np.sum(np.log(np.abs(np.diag(model.L_T))))
    kl = 0.5 * ((tau_P * tau_T + quad) / s2 - P * T + T * np.linalg.slogdet(K_P)[1]
                + P * (T * np.log(s2) + factor.logdet) - T * logdet_sp - P * logdet_st)
    value = float(ell - kl)
    if isinstance(model.intertask, IntertaskCovariance) and P > 1:
        value += lkj_log_prior(cov_to_corr(K_P), model.eta)
    return value


def from_single(model: GPCVModel) -> MTGPCVModel:
    """Express a single-task fit as a one-task model with a free-form intertask matrix."""
    return MTGPCVModel(model.times, model.m[None, :].copy(), model.L.copy(), np.ones((1, 1)),
                       np.array([model.c]), 1.0,
                       IntertaskCovariance(np.zeros(1), np.array([model.sigma2])), model.dt)


class _MTState:
    """Unpacked optimizer state and the gradient of the ELBO for it."""

    def __init__(self, times, W, geodesic, coords, eta):
        self.times, self.W = times, W
        self.P, self.T = W.shape
        self.geodesic, self.coords, self.eta = geodesic, coords, eta
        self.factor = _BrownianFactor(times)
        self.sites = _Sites(self.factor)
        self.tril = np.tril_indices(self.P)

    def split(self, theta):
        """``theta`` holds rho (log sites), L_P raw, c, then intertask parameters."""
        P, T = self.P, self.T
        i = 0
        rho = theta[i:i + T]; i += T
        n_l = len(self.tril[0])
        lp_raw = theta[i:i + n_l]; i += n_l
        c = theta[i:i + P]; i += P
        return rho, lp_raw, c, theta[i:]

    def L_P(self, lp_raw):
        L = np.zeros((self.P, self.P))
        L[self.tril] = lp_raw
        d = np.diag_indices(self.P)
        L[d] = _softplus(L[d])
        return L

    def intertask(self, hyp):
        if self.geodesic:
            return GeodesicKernel(float(np.exp(hyp[0]))), float(np.exp(hyp[1]))
        P = self.P
        return IntertaskCovariance(hyp[:P], np.exp(hyp[P:])), 1.0

    def K_P(self, inter):
        return inter.matrix(self.coords) if self.geodesic else inter.matrix()

    def S_T(self, rho):
        return self.sites.covariance(np.exp(rho), 1.0)

    def evaluate(self, M, theta):
        """ELBO, gradient for M (P x T) and gradient for ``theta``."""
        P, T, times, factor = self.P, self.T, self.times, self.factor
        rho, lp_raw, c, hyp = self.split(theta)
        lam = np.exp(rho)
        chol = self.sites._factor(lam, 1.0)
        S_T = cho_solve_banded((chol, False), np.eye(T))
        S_T = 0.5 * (S_T + S_T.T)
        logdet_st = -2.0 * float(np.sum(np.log(chol[1])))
        L_P = self.L_P(lp_raw)
        S_P = L_P @ L_P.T
        inter, s2 = self.intertask(hyp)
        K_P = self.K_P(inter)
        kpp = np.diag(K_P)
        mu = c[:, None] - np.outer(kpp, times) * s2 / 2.0
        R = M - mu

        st_diag = np.diag(S_T)
        var = np.outer(np.diag(S_P), st_diag)
        ell, d_mu, d_var = _expected_loglik_grads(M, var, self.W)
        KPinv, tau_P, tau_T, R_K0inv, quad = _kl_parts(R, S_P, S_T, K_P, s2, factor)
        logdet_sp = 2.0 * np.sum(np.log(np.diag(L_P)))
        kl = 0.5 * ((tau_P * tau_T + quad) / s2 - P * T + T * np.linalg.slogdet(K_P)[1]
                    + P * (T * np.log(s2) + factor.logdet) - T * logdet_sp - P * logdet_st)
        value = float(np.sum(ell) - kl)
        free = not self.geodesic
        if free and P > 1:
            value += lkj_log_prior(cov_to_corr(K_P), self.eta)

        g_mu = KPinv @ R_K0inv / s2
        g_M = d_mu - g_mu
        g_c = np.sum(g_mu, axis=1)

        # S_P through its Cholesky factor
        G_P = np.diag(d_var @ st_diag) - 0.5 * tau_T / s2 * KPinv
        g_L = np.tril(2.0 * G_P @ L_P)
        g_L[np.diag_indices(P)] += T / np.diag(L_P)
        g_L[np.diag_indices(P)] *= _sigmoid(lp_raw[self._diag_pos()])
        g_lp = g_L[self.tril]

        # S_T = (K0^{-1} + diag(lam))^{-1}
        h = np.diag(S_P) @ d_var
        DS = factor.solve_a(S_T)
        sks = np.sum(DS ** 2, axis=0)
        g_lam = -((S_T ** 2) @ h - 0.5 * tau_P / s2 * sks + 0.5 * P * st_diag)
        g_rho = lam * g_lam

        # intertask matrix and prior scale
        G_K = 0.5 * (tau_T / s2 * KPinv @ S_P @ KPinv + KPinv @ R @ R_K0inv.T @ KPinv / s2
                     - T * KPinv)
        G_K[np.diag_indices(P)] += g_mu @ (-times * s2 / 2.0)
        if free:
            if P > 1:
                G_K += (self.eta - 1.0) * (KPinv - np.diag(1.0 / kpp))
            G_K = 0.5 * (G_K + G_K.T)
            g_hyp = np.concatenate([2.0 * G_K @ inter.a, inter.d * np.diag(G_K)])
        else:
            G_K = 0.5 * (G_K + G_K.T)
            g_len = float(np.sum(G_K * inter.grad_log_sigma(self.coords)))
            g_s2 = (-0.5 * (-(tau_P * tau_T + quad) / s2 ** 2 + P * T / s2)
                    + float(np.sum(g_mu * np.outer(kpp, -times / 2.0))))
            g_hyp = np.array([g_len, g_s2 * s2])
        grad = np.concatenate([g_rho, g_lp, g_c, g_hyp])
        return value, g_M, grad, S_P, S_T

    def _diag_pos(self):
        rows, cols = self.tril
        return np.flatnonzero(rows == cols)


def _mt_init(times, W, geodesic, coords, intertask, sigma2_init):
    P, T = W.shape
    m0 = np.vstack([running_log_std(w) for w in W])
    sigma_y = np.mean(2.0 * W ** 2 * np.exp(-2.0 * m0), axis=0)
    corr = np.corrcoef(m0) if P > 1 else np.ones((1, 1))
    corr = np.nan_to_num(corr, nan=0.0)
    np.fill_diagonal(corr, 1.0)
    corr = (1.0 - _SHRINK) * corr + _SHRINK * np.eye(P)
    if geodesic:
        # start q on the prior correlation so the first mean steps are stable
        sigma = intertask.sigma if isinstance(intertask, GeodesicKernel) else 1.0
        corr = GeodesicKernel(sigma).matrix(coords)
    rho0 = np.log(np.maximum(sigma2_init * sigma_y, STD_FLOOR))
    L_P0 = np.linalg.cholesky(sigma2_init * corr)
    lp = L_P0.copy()
    lp[np.diag_indices(P)] = _softplus_inv(np.diag(L_P0))
    lp_raw = lp[np.tril_indices(P)]
    if geodesic:
        hyp = np.array([np.log(sigma), np.log(sigma2_init)])
        kpp = np.ones(P)
    else:
        if isinstance(intertask, IntertaskCovariance):
            a, d = intertask.a, intertask.d
        else:
            off = corr[~np.eye(P, dtype=bool)]
            rbar = float(np.clip(np.mean(off), 0.0, 0.9)) if P > 1 else 0.0
            a = np.full(P, np.sqrt(sigma2_init * rbar))
            d = np.full(P, sigma2_init * (1.0 - rbar))
        hyp = np.concatenate([a, np.log(d)])
        kpp = a ** 2 + d
    s2 = sigma2_init if geodesic else 1.0
    c = np.mean(m0 + np.outer(kpp, times) * s2 / 2.0, axis=1)
    return m0, np.concatenate([rho0, lp_raw, c, hyp])


def mt_fit(returns, intertask=None, coords=None, steps: int = 500, lr: float = 0.1,
           eta: float = LKJ_ETA, sigma2_init: float = SIGMA2_INIT):
    """Fit multi-task GPCV to a panel of return series; returns ``(model, elbo_trace)``.

    ``intertask`` is ``None`` or an :class:`IntertaskCovariance` for the free
    form (with an LKJ penalty), or a :class:`GeodesicKernel` used with unit
    vectors ``coords``. The variational mean takes natural-gradient steps
    (the gradient preconditioned by ``S``); every other parameter uses Adam.
    A single task is fitted by :func:`fit` and converted.
    """
    times, W, dt = _panel(returns)
    P, T = W.shape
    geodesic = isinstance(intertask, GeodesicKernel)
    if geodesic:
        if coords is None or np.shape(coords) != (P, 3):
            raise ValueError("geodesic intertask kernel needs one unit 3-vector per task")
        coords = np.asarray(coords, dtype=float)
    if P == 1 and not geodesic:
        single, trace = fit(ReturnSeries(times, W[0], dt), steps, lr, sigma2_init)
        return from_single(single), trace
    state = _MTState(times, W, geodesic, coords, eta)
    M, theta = _mt_init(times, W, geodesic, coords, intertask, sigma2_init)
    opt = Adam(lr=lr)
    trace = []
    for it in range(steps + 1):
        value, g_M, g_theta, S_P, S_T = state.evaluate(M, theta)
        if not np.isfinite(value):
            raise FitError("non-finite ELBO during multi-task GPCV fit")
        trace.append(value)
        if it == steps:
            break
        M = M + lr * (S_P @ g_M @ S_T)
        theta = opt.step(theta, g_theta)
    model = _mt_model(state, M, theta, dt, eta)
    return model, trace


def _mt_model(state, M, theta, dt, eta):
    rho, lp_raw, c, hyp = state.split(theta)
    inter, s2 = state.intertask(hyp)
    return MTGPCVModel(state.times, M, jittered_cholesky(state.S_T(rho)), state.L_P(lp_raw),
                       c.copy(), s2, inter, dt, state.coords, eta)


def mt_intertask_correlation(model: MTGPCVModel) -> np.ndarray:
    return cov_to_corr(model.K_P)


def mt_estimate_vol(model: MTGPCVModel, J: int = N_VOL_SAMPLES, seed=0):
    """Per-task per-step volatility paths from ``J`` joint posterior draws."""
    if J < 1:
        raise ValueError("J must be >= 1")
    rng = np.random.default_rng(seed)
    P, T = model.M.shape
    z = rng.standard_normal((J, P, T))
    draws = model.M + np.einsum("pq,jqt,st->jps", model.L_P, z, model.L_T)
    values = np.maximum(np.mean(np.exp(draws), axis=0), STD_FLOOR)
    return [VolatilityPath(model.times, values[p], "per-step", model.dt, J) for p in range(P)]
