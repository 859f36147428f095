"""Exact Gaussian process regression.

Marginal likelihood with analytic gradients, Adam fitting in log space for
positive hyperparameters, posterior prediction and sampling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import jittered_cholesky

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-8
NOISE_INIT = 1e-4
LOG_2PI = np.log(2.0 * np.pi)


class FitError(RuntimeError):
    """Optimization produced a non-finite objective."""


@dataclass(frozen=True)
class GPModel:
    x: np.ndarray
    y: np.ndarray
    kernel: object
    mean: object
    noise: float = NOISE_INIT
    fit_noise: bool = True

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.shape != y.shape:
            raise ValueError("x and y must have the same shape")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def hypers(self) -> dict:
        hp = {**self.mean.hypers(), **self.kernel.hypers()}
        if self.fit_noise:
            hp["noise"] = self.noise
        return hp

    def positive(self) -> set:
        return set(self.kernel.positive) | set(self.mean.positive)

    def with_hypers(self, **hp) -> "GPModel":
        noise = hp.pop("noise", self.noise)
        return replace(self, kernel=self.kernel.with_hypers(**hp),
                       mean=self.mean.with_hypers(**hp), noise=noise)

    def prior_mean(self, x=None):
        if x is None:
            return self.mean(self.x, self.y)
        return self.mean(x)

    def gram(self) -> np.ndarray:
        return self.kernel(self.x) + self.noise * np.eye(len(self.x))


@dataclass(frozen=True)
class GaussianPredictive:
    x: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


# -- marginal likelihood ------------------------------------------------------

def mll(model: GPModel) -> float:
    r = model.y - model.prior_mean()
    L = jittered_cholesky(model.gram())
    a = cho_solve((L, True), r)
    return float(-0.5 * r @ a - np.sum(np.log(np.diag(L))) - 0.5 * len(r) * LOG_2PI)


def mll_and_grad(model: GPModel):
    """MLL and its gradient with respect to each hyperparameter (natural scale)."""
    n = len(model.y)
    r = model.y - model.prior_mean()
    L = jittered_cholesky(model.gram())
    a = cho_solve((L, True), r)
    Kinv = cho_solve((L, True), np.eye(n))
    value = -0.5 * r @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    W = np.outer(a, a) - Kinv
    grad = {}
    for name, dK in model.kernel.grads(model.x).items():
        grad[name] = grad.get(name, 0.0) + 0.5 * np.sum(W * dK)
    if model.fit_noise:
        grad["noise"] = 0.5 * np.trace(W)
    for name, dmu in model.mean.grads(model.x).items():
        grad[name] = grad.get(name, 0.0) + dmu @ a
    return float(value), grad


class _SpectralMLL:
    """MLL for ``K = s * B + noise * I`` with ``B`` fixed, via one eigendecomposition."""

    def __init__(self, model: GPModel):
        self.scale_name = model.kernel.scale_param
        if hasattr(model.kernel, "spectrum"):
            self.lam, self.Q = model.kernel.spectrum(model.x)
        else:
            self.lam, self.Q = np.linalg.eigh(model.kernel.base(model.x))
        self.lam = np.clip(self.lam, 0.0, None)
        self.fixed_r = None
        if not model.mean.hypers():
            self.fixed_r = self.Q.T @ (model.y - model.prior_mean())

    def __call__(self, model: GPModel):
        s = model.kernel.hypers()[self.scale_name]
        d = s * self.lam + model.noise
        if np.min(d) <= 0:
            raise FitError("singular covariance")
        rt = self.fixed_r if self.fixed_r is not None else self.Q.T @ (model.y - model.prior_mean())
        at = rt / d
        value = -0.5 * rt @ at - 0.5 * np.sum(np.log(d)) - 0.5 * len(d) * LOG_2PI
        grad = {self.scale_name: 0.5 * np.sum(at ** 2 * self.lam - self.lam / d)}
        if model.fit_noise:
            grad["noise"] = 0.5 * np.sum(at ** 2 - 1.0 / d)
        for name, dmu in model.mean.grads(model.x).items():
            grad[name] = grad.get(name, 0.0) + (self.Q.T @ dmu) @ at
        return float(value), grad


# -- optimization -------------------------------------------------------------

class Adam:
    """Adam ascent on a flat parameter vector."""

    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params + self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _to_raw(name, value, positive):
    if name == "noise":
        return np.log(max(value - NOISE_FLOOR, NOISE_FLOOR * 1e-3))
    return np.log(value) if name in positive else value


def _from_raw(name, raw, positive):
    if name == "noise":
        return NOISE_FLOOR + np.exp(raw)
    return np.exp(raw) if name in positive else raw


def _raw_jacobian(name, raw, positive):
    if name == "noise" or name in positive:
        return np.exp(raw)
    return 1.0


def fit_hypers(model: GPModel, steps: int = 500, lr: float = 0.1, fixed=()):
    """Maximize the MLL with Adam; returns ``(fitted_model, mll_trace)``.

    Positive hyperparameters and the noise (above a 1e-8 floor) are updated
    in log space. Names in ``fixed`` are left alone.
    """
    names = [n for n in model.hypers() if n not in fixed]
    if steps <= 0 or not names:
        return model, []
    positive = model.positive()
    objective = _SpectralMLL(model) if getattr(model.kernel, "scale_param", None) else mll_and_grad
    raw = np.array([_to_raw(n, model.hypers()[n], positive) for n in names])
    opt = Adam(lr=lr)
    trace = []
    for _ in range(steps):
        hp = {n: _from_raw(n, r, positive) for n, r in zip(names, raw)}
        current = model.with_hypers(**hp)
        value, grad = objective(current)
        if not np.isfinite(value):
            raise FitError(f"non-finite MLL with hypers {hp}")
        trace.append(value)
        g = np.array([grad.get(n, 0.0) * _raw_jacobian(n, r, positive) for n, r in zip(names, raw)])
        raw = opt.step(raw, g)
    hp = {n: _from_raw(n, r, positive) for n, r in zip(names, raw)}
    final = model.with_hypers(**hp)
    value, _ = objective(final)
    trace.append(value)
    return final, trace


# -- prediction ---------------------------------------------------------------

def predict(model: GPModel, xq, include_noise: bool = False) -> GaussianPredictive:
    """Posterior over ``f(xq)`` (optionally plus observation noise)."""
    xq = np.asarray(xq, dtype=float)
    Kqq = model.kernel(xq)
    mq = model.mean(xq) if not getattr(model.mean, "needs_history", False) else _history_mean(model, xq)
    if len(model.x) == 0:
        cov = Kqq
    else:
        L = jittered_cholesky(model.gram())
        r = model.y - model.prior_mean()
        Kqx = model.kernel(xq, model.x)
        mq = mq + Kqx @ cho_solve((L, True), r)
        V = solve_triangular(L, Kqx.T, lower=True)
        cov = Kqq - V.T @ V
    cov = 0.5 * (cov + cov.T)
    if include_noise:
        cov = cov + model.noise * np.eye(len(xq))
    return GaussianPredictive(xq, np.asarray(mq, dtype=float), cov)


def _history_mean(model, xq):
    if len(xq) != 1:
        raise ValueError("a moving-average mean only predicts one step ahead; use a rollout")
    return np.array([model.mean.next(model.y)])


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Matrix ``A`` with ``A A^T = cov``; tolerates singular and zero matrices."""
    if cov.size == 0:
        return cov.copy()
    lam, Q = np.linalg.eigh(0.5 * (cov + cov.T))
    tol = 1e-10 * max(1.0, float(np.max(np.abs(lam))))
    if np.min(lam) < -tol:
        raise np.linalg.LinAlgError("covariance is not positive semidefinite")
    return Q * np.sqrt(np.clip(lam, 0.0, None))


def sample(pred: GaussianPredictive, n_paths: int, seed=0) -> np.ndarray:
    """``n_paths`` rows drawn from ``N(mean, cov)``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = psd_sqrt(pred.cov)
    z = rng.standard_normal((n_paths, len(pred.mean)))
    return pred.mean + z @ A.T


# -- diagnostics --------------------------------------------------------------

def grad_check(objective, params, eps: float = 1e-5, atol: float = 1e-6) -> float:
    """Largest relative gap between an analytic gradient and central differences.

    ``objective(params)`` returns ``(value, gradient)``.
    """
    params = np.asarray(params, dtype=float)
    _, g = objective(params)
    g = np.asarray(g, dtype=float)
    worst = 0.0
    for i in range(len(params)):
        # relative step, so small positive hypers (noise ~ 1e-4) are probed finely
        step = eps * (abs(params[i]) if params[i] != 0 else 1.0)
        up, dn = params.copy(), params.copy()
        up[i] += step
        dn[i] -= step
        fd = (objective(up)[0] - objective(dn)[0]) / (2 * step)
        err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), atol)
        worst = max(worst, err)
    return worst


def model_objective(model: GPModel, names=None):
    """Flat-vector wrapper around :func:`mll_and_grad` for :func:`grad_check`."""
    names = list(names or model.hypers())

    def objective(vec):
        m = model.with_hypers(**dict(zip(names, vec)))
        value, grad = mll_and_grad(m)
        return value, np.array([grad.get(n, 0.0) for n in names])

    return objective, np.array([model.hypers()[n] for n in names])
