"""The hierarchical Volt pipeline.

Training runs in three steps: GPCV on log returns gives a volatility path,
a Brownian-kernel GP is fitted to the log of that path, and a GP with the
integrated-volatility kernel is fitted to the log data. Forecasts sample
future volatility paths from the second GP and, for each, log-data paths
from the third.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from . import gpcv
from .gp import NOISE_INIT, GPModel, fit_hypers, predict, psd_sqrt, sample
from .kernels import BrownianKernel, ICMKernel, MaternKernel, VoltKernel, jittered_cholesky
from .means import DriftMean, MagpieMean, TaskDriftMean
from .timeseries import ReturnSeries, SeriesError, TimeSeries, make_grid

MIN_LENGTH = 50
MEANS = ("constant", "linear", "magpie")


@dataclass(frozen=True)
class VoltConfig:
    """Training settings: 500 Adam steps at rate 0.1 for every stage, constant mean."""

    mean: str = "constant"
    k: int = 100
    variant: str = "ema"
    ema_mode: str = "normalized"
    gpcv_steps: int = 500
    gpcv_lr: float = 0.1
    gp_steps: int = 500
    gp_lr: float = 0.1
    noise_init: float = NOISE_INIT
    J: int = gpcv.N_VOL_SAMPLES
    seed: int = 0
    vol_drift: bool = True
    volvol: str = "gpcv"
    eta: float = gpcv.LKJ_ETA

    def __post_init__(self):
        if self.mean not in MEANS:
            raise ValueError(f"mean must be one of {MEANS}, got {self.mean!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        for name in ("gpcv_steps", "gp_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("gpcv_lr", "gp_lr", "noise_init"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.volvol not in ("gpcv", "mll"):
            raise ValueError("volvol must be 'gpcv' or 'mll'")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    def data_mean(self, t, s):
        if self.mean == "magpie":
            return MagpieMean(self.k, self.variant, self.ema_mode)
        if self.mean == "linear":
            slope, intercept = np.polyfit(t, s, 1)
            return DriftMean("linear", mu_s=float(slope), s0=float(intercept))
        # exact value for a flat series so the mean gradient vanishes exactly
        c = float(s[0]) if np.ptp(s) == 0 else float(np.mean(s))
        return DriftMean("constant", c=c)


@dataclass(frozen=True)
class ForecastConfig:
    horizon: int = 100
    n_vol: int = 10
    n_data: int = 100
    theta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_vol < 1 or self.n_data < 1:
            raise ValueError("n_vol and n_data must be >= 1")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")


@dataclass(frozen=True)
class VoltModel:
    gpcv: object
    volpath: gpcv.VolatilityPath
    vol_gp: GPModel
    data_gp: GPModel
    dt: float
    config: VoltConfig = field(default_factory=VoltConfig)
    shift: float = 0.0

    def __post_init__(self):
        x = self.data_gp.x
        if not (np.allclose(self.volpath.times, x) and np.allclose(self.vol_gp.x, x)):
            raise ValueError("volatility path, vol GP and data GP must share one grid")
        if not self.volvol > 0:
            raise ValueError("volvol must be positive")

    @property
    def n(self) -> int:
        return len(self.data_gp.x)

    @property
    def volvol(self) -> float:
        return float(self.vol_gp.kernel.sigma2)

    @property
    def train_mean(self) -> float:
        return float(np.mean(self.data_gp.y))


@dataclass(frozen=True)
class ForecastEnsemble:
    """Sampled future paths. Row ``i`` used volatility path ``i // n_data``."""

    times: np.ndarray
    log_paths: np.ndarray
    vol_paths: np.ndarray
    n_vol: int
    n_data: int
    seed: int
    theta: float
    shift: float = 0.0
    model_id: str = ""
    step_means: np.ndarray | None = None
    step_sds: np.ndarray | None = None

    def __post_init__(self):
        if self.log_paths.shape != (self.n_vol * self.n_data, len(self.times)):
            raise ValueError("path array does not match n_vol * n_data x horizon")
        if not np.all(np.isfinite(self.log_paths)):
            raise ValueError("forecast paths must be finite")

    @property
    def horizon(self) -> int:
        return len(self.times)

    @property
    def paths(self) -> np.ndarray:
        """Paths in data space."""
        return np.exp(self.log_paths) - self.shift


def model_id(model) -> str:
    """Short content hash of the training data and fitted hyperparameters."""
    h = hashlib.sha256()
    gps = [model.data_gp] if isinstance(model, VoltModel) else [t.data_gp for t in model.tasks]
    for gp in gps:
        h.update(np.ascontiguousarray(gp.y).tobytes())
        h.update(repr(sorted((k, float(v)) for k, v in gp.hypers().items())).encode())
    return h.hexdigest()[:12]


# -- training ------------------------------------------------------------------

def _log_values(series: TimeSeries):
    """Log-space values and the additive shift used to get there."""
    values = np.asarray(series.values, dtype=float)
    if series.log_applied:
        return values, float(series.shift)
    if np.any(values <= 0):
        raise SeriesError("values must be positive; apply to_log with a shift first")
    return np.log(values), 0.0


def _check_uniform(series: TimeSeries):
    steps = np.diff(series.times)
    if len(steps) and not np.allclose(steps, series.dt, rtol=1e-6, atol=1e-12):
        raise SeriesError("series must be uniformly spaced at its dt")


def _fit_vol_gp(x, log_vol, sigma2, cfg: VoltConfig) -> GPModel:
    if cfg.vol_drift:
        mean = DriftMean("brownian_drift", sigma2=sigma2,
                         offset=float(np.mean(log_vol + x * sigma2 / 2.0)))
    else:
        mean = DriftMean("constant", c=float(np.mean(log_vol)))
    model = GPModel(x, log_vol, BrownianKernel(sigma2), mean, cfg.noise_init)
    fixed = ("sigma2",) if cfg.volvol == "gpcv" else ()
    return fit_hypers(model, cfg.gp_steps, cfg.gp_lr, fixed=fixed)[0]


def _fit_data_gp(x, s, vol, dt, cfg: VoltConfig) -> GPModel:
    model = GPModel(x, s, VoltKernel(vol, dt), cfg.data_mean(x, s), cfg.noise_init)
    return fit_hypers(model, cfg.gp_steps, cfg.gp_lr)[0]


def _kernel_vol(step_vol: np.ndarray) -> np.ndarray:
    """Volatility for every data grid step; the first step has no return and
    borrows the estimate of the second."""
    return np.concatenate([step_vol[:1], step_vol])


def fit_volt(series: TimeSeries, config: VoltConfig | None = None) -> VoltModel:
    """Three-step fit: GPCV volatility, volatility GP, then data GP."""
    cfg = config or VoltConfig()
    if len(series) < MIN_LENGTH:
        raise SeriesError(f"series too short (min {MIN_LENGTH}), got {len(series)}")
    _check_uniform(series)
    s, shift = _log_values(series)
    dt = series.dt
    x = make_grid(len(s), dt).times
    returns = ReturnSeries(x[1:], np.diff(s), dt)
    latent, _ = gpcv.fit(returns, cfg.gpcv_steps, cfg.gpcv_lr)
    vhat = gpcv.annualize(gpcv.estimate_vol(latent, J=cfg.J, seed=cfg.seed), dt)
    vol = _kernel_vol(vhat.values)
    volpath = gpcv.VolatilityPath(x, vol, "annualized", dt, cfg.J)
    vol_gp = _fit_vol_gp(x, np.log(vol), latent.sigma2, cfg)
    data_gp = _fit_data_gp(x, s, vol, dt, cfg)
    return VoltModel(latent, volpath, vol_gp, data_gp, dt, cfg, shift)


# -- forecasting ----------------------------------------------------------------

def _future_times(n: int, horizon: int, dt: float) -> np.ndarray:
    return dt * np.arange(n + 1, n + horizon + 1)


def sample_vol_paths(model: VoltModel, H: int, N_v: int, seed=0) -> np.ndarray:
    """``N_v`` annualized volatility paths over the next ``H`` steps, shape ``(N_v, H)``."""
    if H < 1 or N_v < 1:
        raise ValueError("H and N_v must be >= 1")
    pred = predict(model.vol_gp, _future_times(model.n, H, model.dt))
    return np.exp(sample(pred, N_v, seed))


def _rollout(gp: GPModel, horizon: int, n_paths: int, theta: float, rng):
    """Sequential one-step sampling, conditioning on every sampled value.

    One Cholesky factor of the noisy train-plus-future covariance serves all
    steps: row ``T + h`` gives the conditional mean and standard deviation
    of step ``h`` given everything before it. Mean reversion moves each
    one-step mean towards the training mean by the fraction ``theta``.
    """
    T = len(gp.x)
    xf = _future_times(T, horizon, gp.kernel.dt)
    x_all = np.concatenate([gp.x, xf])
    C = gp.kernel(x_all) + gp.noise * np.eye(T + horizon)
    L = jittered_cholesky(C)
    base_train = gp.prior_mean()
    z = np.empty((n_paths, T + horizon))
    z[:, :T] = solve_triangular(L[:T, :T], gp.y - base_train, lower=True)
    hist = np.empty((n_paths, T + horizon))
    hist[:, :T] = gp.y
    s_bar = float(np.mean(gp.y))
    means = np.empty((n_paths, horizon))
    sds = np.empty(horizon)
    eps = rng.standard_normal((n_paths, horizon))
    for h in range(horizon):
        i = T + h
        if getattr(gp.mean, "needs_history", False):
            base = gp.mean.next(hist[:, :i])
        else:
            base = np.full(n_paths, float(gp.mean(xf[h:h + 1])[0]))
        cond = z[:, :i] @ L[i, :i]
        sd = L[i, i]
        mu = base + cond
        mu = (1.0 - theta) * mu + theta * s_bar
        draw = mu + sd * eps[:, h]
        z[:, i] = (draw - base - cond) / sd
        hist[:, i] = draw
        means[:, h] = mu
        sds[h] = sd
    return hist[:, T:], means, sds


def _data_paths(model: VoltModel, vols: np.ndarray, cfg: ForecastConfig, seeds):
    """Log-data paths for each volatility path in ``vols`` (``N_v x H``)."""
    gp = model.data_gp
    joint = not getattr(gp.mean, "needs_history", False) and cfg.theta == 0.0
    xf = _future_times(model.n, cfg.horizon, model.dt)
    out, means, sds = [], [], []
    for vol, ss in zip(vols, seeds):
        rng = np.random.default_rng(ss)
        gp_v = replace(gp, kernel=gp.kernel.extend(vol))
        if joint:
            out.append(sample(predict(gp_v, xf, include_noise=True), cfg.n_data, rng))
        else:
            paths, mu, sd = _rollout(gp_v, cfg.horizon, cfg.n_data, cfg.theta, rng)
            out.append(paths)
            means.append(mu)
            sds.append(np.broadcast_to(sd, mu.shape))
    step_means = np.vstack(means) if means else None
    step_sds = np.vstack(sds) if sds else None
    return np.vstack(out), step_means, step_sds


def forecast(model: VoltModel, cfg: ForecastConfig | None = None) -> ForecastEnsemble:
    """``n_vol * n_data`` future paths.

    Constant and linear means without mean reversion sample each path
    jointly from the Gaussian posterior; Magpie means or ``theta > 0`` use
    one-step rollouts.
    """
    cfg = cfg or ForecastConfig()
    root = np.random.SeedSequence(cfg.seed)
    vol_seed, *path_seeds = root.spawn(1 + cfg.n_vol)
    vols = sample_vol_paths(model, cfg.horizon, cfg.n_vol, np.random.default_rng(vol_seed))
    log_paths, means, sds = _data_paths(model, vols, cfg, path_seeds)
    return ForecastEnsemble(_future_times(model.n, cfg.horizon, model.dt), log_paths, vols,
                            cfg.n_vol, cfg.n_data, cfg.seed, cfg.theta, model.shift,
                            model_id(model), means, sds)


def one_step_predictive(model: VoltModel, future_vol: float, theta: float = 0.0):
    """Mean and standard deviation of the first forecast step given one
    future volatility value, from the rollout recursion."""
    gp = replace(model.data_gp, kernel=model.data_gp.kernel.extend([future_vol]))
    _, means, sds = _rollout(gp, 1, 1, theta, np.random.default_rng(0))
    return float(means[0, 0]), float(sds[0])


# -- prior sampling -------------------------------------------------------------

def prior_simulate(mu_s: float, sigma2: float, V0: float, s0: float, H: int,
                   n_paths: int, dt: float, seed=0) -> ForecastEnsemble:
    """Paths of ``s`` at ``dt, ..., H dt`` from the hierarchical GP prior.

    Log volatility is drawn from the Brownian prior with drift
    ``-t sigma2 / 2`` started at ``log V0``; the volatility over step ``i``
    is its value at the start of the step. Given each volatility path,
    ``s`` is Gaussian with mean ``s0 + mu_s t`` and the integrated
    volatility kernel as covariance.
    """
    if H < 1 or n_paths < 1:
        raise ValueError("H and n_paths must be >= 1")
    if sigma2 < 0 or V0 <= 0 or dt <= 0:
        raise ValueError("need sigma2 >= 0, V0 > 0 and dt > 0")
    rng = np.random.default_rng(seed)
    t = make_grid(H, dt).times
    logv = np.full((n_paths, H), np.log(V0))
    if H > 1:
        tv = t[:-1]
        cov = sigma2 * np.minimum.outer(tv, tv)
        v = np.log(V0) - tv * sigma2 / 2.0 + rng.standard_normal((n_paths, H - 1)) @ psd_sqrt(cov).T
        logv[:, 1:] = v
    vol = np.exp(logv)
    cum = np.cumsum(vol ** 2 * dt, axis=1)
    idx = np.minimum.outer(np.arange(H), np.arange(H))
    K = cum[:, idx]
    L = np.linalg.cholesky(K)
    z = rng.standard_normal((n_paths, H, 1))
    s = s0 + mu_s * t + (L @ z)[..., 0]
    return ForecastEnsemble(t, s, vol, n_paths, 1, int(seed) if np.isscalar(seed) else 0, 0.0)


# -- baselines ------------------------------------------------------------------

def fit_baseline(series: TimeSeries, kernel: str = "matern", config: VoltConfig | None = None) -> GPModel:
    """Single GP on the log data with a stationary kernel; the comparison model."""
    cfg = config or VoltConfig()
    if kernel != "matern":
        raise ValueError(f"unknown baseline kernel {kernel!r}")
    _check_uniform(series)
    s, _ = _log_values(series)
    x = make_grid(len(s), series.dt).times
    k = MaternKernel(lengthscale=float(x[-1]) / 4.0, amplitude=max(float(np.var(s)), 1e-6))
    model = GPModel(x, s, k, cfg.data_mean(x, s), cfg.noise_init)
    return fit_hypers(model, cfg.gp_steps, cfg.gp_lr)[0]


def forecast_baseline(model: GPModel, cfg: ForecastConfig | None = None, dt: float | None = None,
                      shift: float = 0.0) -> ForecastEnsemble:
    cfg = cfg or ForecastConfig()
    dt = dt or float(model.x[1] - model.x[0])
    xf = _future_times(len(model.x), cfg.horizon, dt)
    n = cfg.n_vol * cfg.n_data
    paths = sample(predict(model, xf, include_noise=True), n, cfg.seed)
    return ForecastEnsemble(xf, paths, np.zeros((cfg.n_vol, cfg.horizon)), cfg.n_vol,
                            cfg.n_data, cfg.seed, cfg.theta, shift)


# -- multi-task -----------------------------------------------------------------

@dataclass(frozen=True)
class MTVoltModel:
    """Shared multi-task GPCV, a joint volatility GP and one data GP per task."""

    gpcv: object
    tasks: tuple
    vol_gp: GPModel | None
    config: VoltConfig = field(default_factory=VoltConfig)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)


def _task_vol_gp(x, log_vol, sigma2, offset, noise, cfg: VoltConfig) -> GPModel:
    mean = DriftMean("brownian_drift", sigma2=sigma2, offset=offset) if cfg.vol_drift \
        else DriftMean("constant", c=offset)
    return GPModel(x, log_vol, BrownianKernel(sigma2), mean, noise)


def fit_mt_volt(panel, intertask=None, coords=None, config: VoltConfig | None = None) -> MTVoltModel:
    """Multi-task fit: one MT-GPCV, an ICM volatility GP, independent data GPs.

    The volatility GP keeps the intertask matrix learned by MT-GPCV and fits
    its overall scale, the noise and per-task offsets.
    """
    cfg = config or VoltConfig()
    panel = list(panel)
    if not panel:
        raise ValueError("empty panel")
    if len(panel) == 1 and intertask is None:
        single = fit_volt(panel[0], cfg)
        return MTVoltModel(gpcv.from_single(single.gpcv), (single,), None, cfg)
    n = len(panel[0])
    dt = panel[0].dt
    for p, series in enumerate(panel):
        if len(series) != n or not np.isclose(series.dt, dt):
            raise SeriesError(f"task {p} is not on the shared grid")
        if len(series) < MIN_LENGTH:
            raise SeriesError(f"series too short (min {MIN_LENGTH}), got {len(series)}")
        _check_uniform(series)
    logs = [_log_values(series) for series in panel]
    x = make_grid(n, dt).times
    returns = [ReturnSeries(x[1:], np.diff(s), dt) for s, _ in logs]
    latent, _ = gpcv.mt_fit(returns, intertask, coords, cfg.gpcv_steps, cfg.gpcv_lr, cfg.eta)
    vols = [_kernel_vol(gpcv.annualize(v, dt).values)
            for v in gpcv.mt_estimate_vol(latent, cfg.J, cfg.seed)]
    P = len(panel)
    log_vol = np.log(np.vstack(vols))
    B = latent.K_P
    s2 = latent.sigma2
    if cfg.vol_drift:
        offsets = np.mean(log_vol + np.outer(np.diag(B), x) * s2 / 2.0, axis=1)
        mean = TaskDriftMean(offsets, s2, np.diag(B))
    else:
        mean = TaskDriftMean(np.mean(log_vol, axis=1), s2, np.zeros(P))
    xs = np.tile(x, P)
    vol_gp = GPModel(xs, log_vol.ravel(), ICMKernel(B, s2), mean, cfg.noise_init)
    fixed = ("sigma2",) if cfg.volvol == "gpcv" else ()
    vol_gp = fit_hypers(vol_gp, cfg.gp_steps, cfg.gp_lr, fixed=fixed)[0]
    scale = vol_gp.kernel.sigma2
    tasks = []
    for p, ((s, shift), vol) in enumerate(zip(logs, vols)):
        volpath = gpcv.VolatilityPath(x, vol, "annualized", dt, cfg.J)
        offset = vol_gp.mean.offsets[p]
        vgp = _task_vol_gp(x, log_vol[p], scale * B[p, p], offset, vol_gp.noise, cfg)
        data_gp = _fit_data_gp(x, s, vol, dt, cfg)
        tasks.append(VoltModel(latent.task(p), volpath, vgp, data_gp, dt, cfg, shift))
    return MTVoltModel(latent, tuple(tasks), vol_gp, cfg)


def sample_mt_vol_paths(model: MTVoltModel, H: int, N_v: int, seed=0) -> np.ndarray:
    """Correlated annualized volatility paths, shape ``(N_v, P, H)``."""
    P = model.n_tasks
    t0 = model.tasks[0]
    xf = np.tile(_future_times(t0.n, H, t0.dt), P)
    draws = sample(predict(model.vol_gp, xf), N_v, seed)
    return np.exp(draws.reshape(N_v, P, H))


def forecast_mt(model: MTVoltModel, cfg: ForecastConfig | None = None) -> list:
    """One ensemble per task; volatility paths are sampled jointly across tasks."""
    cfg = cfg or ForecastConfig()
    if model.vol_gp is None:
        return [forecast(model.tasks[0], cfg)]
    root = np.random.SeedSequence(cfg.seed)
    vol_seed, *task_seeds = root.spawn(1 + model.n_tasks)
    vols = sample_mt_vol_paths(model, cfg.horizon, cfg.n_vol, np.random.default_rng(vol_seed))
    out = []
    for p, task in enumerate(model.tasks):
        seeds = task_seeds[p].spawn(cfg.n_vol)
        log_paths, means, sds = _data_paths(task, vols[:, p], cfg, seeds)
        out.append(ForecastEnsemble(_future_times(task.n, cfg.horizon, task.dt), log_paths,
                                    vols[:, p], cfg.n_vol, cfg.n_data, cfg.seed, cfg.theta,
                                    task.shift, model_id(task), means, sds))
    return out
