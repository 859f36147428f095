"""Covariance functions.

Each kernel is an immutable value object. Kernels used inside
:class:`volt.gp.GPModel` expose ``hypers()`` (name -> value),
``positive`` (names kept positive during fitting), ``with_hypers`` and
``grads(x)`` returning the derivative of the Gram matrix for each
hyperparameter. Kernels of the form ``scale * B(x, x')`` also set
``scale_param`` and ``base``, which lets the GP engine fit them through
a single eigendecomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError

JITTERS = (1e-6, 1e-4)


class NotPositiveDefinite(LinAlgError):
    pass


def jittered_cholesky(K: np.ndarray, exact_first: bool = True) -> np.ndarray:
    """Lower Cholesky factor of ``K``.

    Tries ``K`` as given, then with 1e-6 and 1e-4 times the mean diagonal
    added, then gives up.
    """
    K = np.asarray(K, dtype=float)
    if K.size == 0:
        return K.copy()
    scale = max(float(np.mean(np.abs(np.diag(K)))), np.finfo(float).tiny)
    levels = ((0.0,) if exact_first else ()) + JITTERS
    for jitter in levels:
        try:
            return np.linalg.cholesky(K + jitter * scale * np.eye(len(K)))
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"matrix of size {len(K)} is not positive definite after jitter {JITTERS[-1]:g}")


def _check_positive(name, value):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be positive")


# -- Brownian motion --------------------------------------------------------

def bm_cov(t, t2, sigma2: float):
    """``sigma2 * min(t, t2)``; broadcasts over array inputs."""
    t, t2 = np.asarray(t, dtype=float), np.asarray(t2, dtype=float)
    if np.any(t <= 0) or np.any(t2 <= 0):
        raise ValueError("Brownian kernel needs strictly positive times")
    _check_positive("sigma2", sigma2)
    out = sigma2 * np.minimum(t, t2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BrownianKernel:
    sigma2: float = 1.0

    positive = ("sigma2",)
    scale_param = "sigma2"

    def __post_init__(self):
        _check_positive("sigma2", self.sigma2)

    def hypers(self):
        return {"sigma2": self.sigma2}

    def with_hypers(self, **hp):
        return replace(self, **{k: v for k, v in hp.items() if k == "sigma2"})

    def base(self, x1, x2=None):
        x1 = np.asarray(x1, dtype=float)
        x2 = x1 if x2 is None else np.asarray(x2, dtype=float)
        if np.any(x1 <= 0) or np.any(x2 <= 0):
            raise ValueError("Brownian kernel needs strictly positive times")
        return np.minimum.outer(x1, x2)

    def __call__(self, x1, x2=None):
        return self.sigma2 * self.base(x1, x2)

    def diag(self, x):
        return self.sigma2 * np.asarray(x, dtype=float)

    def grads(self, x):
        return {"sigma2": self.base(x)}


def brownian_increment_factor(times) -> np.ndarray:
    """Diagonal of the lower Cholesky factor of ``min(t_i, t_j)``.

    On an increasing grid ``min(t_i, t_j) = A A^T`` with
    ``A[i, l] = sqrt(dt_l)`` for ``l <= i``, so the inverse factor is a
    scaled first-difference operator.
    """
    times = np.asarray(times, dtype=float)
    return np.diff(times, prepend=0.0)


@dataclass(frozen=True)
class ICMKernel:
    """``sigma2 * B[p, p'] * min(t, t')`` over a task-major stack of one time grid.

    Inputs are the grid repeated once per task, so ``len(x)`` is a multiple
    of the task count.
    """

    task_cov: np.ndarray
    sigma2: float = 1.0

    positive = ("sigma2",)
    scale_param = "sigma2"

    def __post_init__(self):
        B = np.array(self.task_cov, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1] or not np.allclose(B, B.T):
            raise ValueError("task covariance must be a symmetric square matrix")
        _check_positive("sigma2", self.sigma2)
        B.setflags(write=False)
        object.__setattr__(self, "task_cov", B)

    @property
    def n_tasks(self) -> int:
        return self.task_cov.shape[0]

    def grid(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.n_tasks, -1)
        if not np.allclose(x, x[0]):
            raise ValueError("inputs must repeat one time grid per task")
        return x[0]

    def hypers(self):
        return {"sigma2": self.sigma2}

    def with_hypers(self, **hp):
        return replace(self, **{k: v for k, v in hp.items() if k == "sigma2"})

    def base(self, x1, x2=None):
        t1 = self.grid(x1)
        t2 = t1 if x2 is None else self.grid(x2)
        if np.any(t1 <= 0) or np.any(t2 <= 0):
            raise ValueError("Brownian kernel needs strictly positive times")
        return np.kron(self.task_cov, np.minimum.outer(t1, t2))

    def spectrum(self, x):
        """Eigenpairs of ``base(x)`` from the two Kronecker factors."""
        t = self.grid(x)
        lb, Qb = np.linalg.eigh(self.task_cov)
        lt, Qt = np.linalg.eigh(np.minimum.outer(t, t))
        return np.clip(np.kron(lb, lt), 0.0, None), np.kron(Qb, Qt)

    def __call__(self, x1, x2=None):
        return self.sigma2 * self.base(x1, x2)

    def diag(self, x):
        t = self.grid(x)
        return self.sigma2 * np.kron(np.diag(self.task_cov), t)

    def grads(self, x):
        return {"sigma2": self.base(x)}


# -- integrated volatility ---------------------------------------------------

@dataclass(frozen=True)
class VoltKernel:
    """Integrated squared volatility on a uniform grid ``dt, 2 dt, ...``.

    ``vol[i]`` is the annualized volatility driving the step that ends at
    grid point ``i``; ``cum[i] = sum_{l <= i} vol[l]**2 * dt`` is the
    left-Riemann discretization of the integral of ``V(u)**2``.
    """

    vol: np.ndarray
    dt: float
    scale: float = 1.0
    cum: np.ndarray = field(init=False, repr=False)

    positive = ("scale",)
    scale_param = "scale"

    def __post_init__(self):
        vol = np.array(self.vol, dtype=float)
        if vol.ndim != 1 or not np.all(np.isfinite(vol)):
            raise ValueError("vol must be a finite 1-d array")
        if np.any(vol < 0):
            raise ValueError("vol must be nonnegative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        _check_positive("scale", self.scale)
        vol.setflags(write=False)
        cum = np.cumsum(vol ** 2 * self.dt)
        cum.setflags(write=False)
        object.__setattr__(self, "vol", vol)
        object.__setattr__(self, "cum", cum)

    def __len__(self):
        return len(self.vol)

    def extend(self, future_vol) -> "VoltKernel":
        """Append future volatility steps; training entries are unchanged."""
        return replace(self, vol=np.concatenate([self.vol, np.asarray(future_vol, float)]))

    def hypers(self):
        return {"scale": self.scale}

    def with_hypers(self, **hp):
        return replace(self, **{k: v for k, v in hp.items() if k == "scale"})

    def index(self, x) -> np.ndarray:
        """Map times on the grid to integer indices."""
        x = np.asarray(x, dtype=float)
        idx = np.rint(x / self.dt).astype(int) - 1
        if np.any(np.abs((idx + 1) * self.dt - x) > 1e-6 * self.dt):
            raise ValueError("times are not on the kernel grid")
        if np.any(idx < 0) or np.any(idx >= len(self.vol)):
            raise IndexError("time outside the volatility grid")
        return idx

    def base(self, x1, x2=None):
        i1 = self.index(x1)
        i2 = i1 if x2 is None else self.index(x2)
        return self.cum[np.minimum.outer(i1, i2)]

    def __call__(self, x1, x2=None):
        return self.scale * self.base(x1, x2)

    def diag(self, x):
        return self.scale * self.cum[self.index(x)]

    def grads(self, x):
        return {"scale": self.base(x)}


def volt_cov_matrix(kernel: VoltKernel, idx, idx2=None) -> np.ndarray:
    """Gram matrix by grid index: entry ``(i, j)`` is ``cum[min(idx_i, idx2_j)]``."""
    idx = np.asarray(idx, dtype=int)
    idx2 = idx if idx2 is None else np.asarray(idx2, dtype=int)
    n = len(kernel.cum)
    for ix in (idx, idx2):
        if ix.size and (ix.min() < 0 or ix.max() >= n):
            raise IndexError(f"index out of range for grid of {n} points")
    return kernel.scale * kernel.cum[np.minimum.outer(idx, idx2)]


# -- Matern 5/2 ----------------------------------------------------------------

def matern_cov(x, x2, lengthscale: float, amplitude: float):
    _check_positive("lengthscale", lengthscale)
    _check_positive("amplitude", amplitude)
    r = np.sqrt(5.0) * np.abs(np.asarray(x, float) - np.asarray(x2, float)) / lengthscale
    out = amplitude * (1.0 + r + r ** 2 / 3.0) * np.exp(-r)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class MaternKernel:
    lengthscale: float = 1.0
    amplitude: float = 1.0

    positive = ("lengthscale", "amplitude")
    scale_param = None

    def __post_init__(self):
        _check_positive("lengthscale", self.lengthscale)
        _check_positive("amplitude", self.amplitude)

    def hypers(self):
        return {"lengthscale": self.lengthscale, "amplitude": self.amplitude}

    def with_hypers(self, **hp):
        return replace(self, **{k: v for k, v in hp.items() if k in self.positive})

    def __call__(self, x1, x2=None):
        x1 = np.asarray(x1, dtype=float)
        x2 = x1 if x2 is None else np.asarray(x2, dtype=float)
        return matern_cov(x1[:, None], x2[None, :], self.lengthscale, self.amplitude)

    def diag(self, x):
        return np.full(len(x), self.amplitude)

    def grads(self, x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(5.0) * np.abs(x[:, None] - x[None, :]) / self.lengthscale
        e = np.exp(-r)
        # d/dr of (1 + r + r^2/3) e^{-r} is -(r/3)(1 + r) e^{-r}
        d_ls = self.amplitude * (r / 3.0) * (1.0 + r) * e * r / self.lengthscale
        return {"lengthscale": d_ls, "amplitude": (1.0 + r + r ** 2 / 3.0) * e}


# -- tasks ---------------------------------------------------------------------

def latlon_to_unit(lat_deg, lon_deg) -> np.ndarray:
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def _geodesic_distance(X, Y):
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    for Z in (X, Y):
        if np.any(np.abs(np.linalg.norm(Z, axis=-1) - 1.0) > 1e-8):
            raise ValueError("geodesic kernel inputs must be unit vectors")
    return np.arccos(np.clip(X @ Y.T, -1.0, 1.0))


def geodesic_cov(x, y, sigma: float) -> float:
    """``exp(-arccos(x.y) / (2 sigma^2))`` for unit vectors ``x`` and ``y``."""
    _check_positive("sigma", sigma)
    return float(np.exp(-_geodesic_distance(x, y)[0, 0] / (2.0 * sigma ** 2)))


@dataclass(frozen=True)
class GeodesicKernel:
    sigma: float = 1.0

    def __post_init__(self):
        _check_positive("sigma", self.sigma)

    def matrix(self, X) -> np.ndarray:
        return np.exp(-_geodesic_distance(X, X) / (2.0 * self.sigma ** 2))

    def grad_log_sigma(self, X) -> np.ndarray:
        D = _geodesic_distance(X, X)
        return np.exp(-D / (2.0 * self.sigma ** 2)) * D / self.sigma ** 2


@dataclass(frozen=True)
class IntertaskCovariance:
    """Rank-one-plus-diagonal task covariance ``a a^T + diag(d)``."""

    a: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float).ravel()
        d = np.array(self.d, dtype=float).ravel()
        if a.shape != d.shape or len(a) < 1:
            raise ValueError("a and d must be nonempty vectors of equal length")
        if np.any(d <= 0):
            raise ValueError("intertask diagonal entries must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "d", d)

    @property
    def n_tasks(self) -> int:
        return len(self.a)

    def matrix(self) -> np.ndarray:
        return intertask_matrix(self.a, self.d)


def intertask_matrix(a, d) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    d = np.asarray(d, dtype=float).ravel()
    if np.any(d <= 0):
        raise ValueError("intertask diagonal entries must be positive")
    return np.outer(a, a) + np.diag(d)


def cov_to_corr(K: np.ndarray) -> np.ndarray:
    s = 1.0 / np.sqrt(np.diag(K))
    C = K * np.outer(s, s)
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def lkj_log_prior(corr: np.ndarray, eta: float) -> float:
    """Unnormalized LKJ log density ``(eta - 1) log det(corr)``."""
    _check_positive("eta", eta)
    corr = np.asarray(corr, dtype=float)
    try:
        L = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("correlation matrix is not positive definite") from None
    return float((eta - 1.0) * 2.0 * np.sum(np.log(np.diag(L))))
