"""Mean functions: drifts and moving-average (Magpie) means."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MODES = ("normalized", "literal")
VARIANTS = ("ema", "dema", "tema")


def smoothing(k: int) -> float:
    if k < 1:
        raise ValueError("window length k must be >= 1")
    return 2.0 / (k + 1.0)


def ema_weights(k: int, n: int, mode: str = "normalized", window: int | None = None) -> np.ndarray:
    """Weights applied to the latest ``min(window, n)`` values, newest first."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    alpha = smoothing(k)
    m = min(window or k, n)
    w = alpha * (1.0 - alpha) ** np.arange(m)
    if mode == "normalized":
        w = w / w.sum()
    return w


def ema_next(history, k: int, mode: str = "normalized", window: int | None = None):
    """Moving-average prediction of the next value.

    ``history`` may be 2-d with time on the last axis; each row is handled
    independently. ``window`` defaults to ``k`` terms.
    """
    h = np.asarray(history, dtype=float)
    if h.shape[-1] == 0:
        raise ValueError("empty history")
    w = ema_weights(k, h.shape[-1], mode, window)
    return h[..., : -len(w) - 1: -1] @ w if len(w) < h.shape[-1] else h[..., ::-1] @ w


def _ema_tail(h: np.ndarray, k: int, mode: str, window: int, last: int) -> np.ndarray:
    """EMA evaluated at each of the final ``last`` prefixes of ``h``."""
    n = h.shape[-1]
    out = np.empty(h.shape[:-1] + (last,))
    # prefixes long enough for a full window share one weight vector
    w_full = ema_weights(k, window, mode, window)
    full_start = max(window, n - last + 1)
    short = [j for j in range(n - last + 1, min(full_start, n + 1))]
    for j in short:
        out[..., j - (n - last + 1)] = ema_next(h[..., :j], k, mode, window)
    if full_start <= n:
        views = sliding_window_view(h[..., full_start - window:], window, axis=-1)
        out[..., full_start - (n - last + 1):] = views[..., ::-1] @ w_full
    return out


def dema_next(history, k: int, mode: str = "normalized", window: int | None = None):
    """``2 EMA - EMA(EMA)``."""
    h = np.asarray(history, dtype=float)
    if h.shape[-1] == 0:
        raise ValueError("empty history")
    window = window or k
    n = h.shape[-1]
    e1 = _ema_tail(h, k, mode, window, min(n, window))
    return 2.0 * e1[..., -1] - ema_next(e1, k, mode, window)


def tema_next(history, k: int, mode: str = "normalized", window: int | None = None):
    """``3 EMA - 3 EMA(EMA) + EMA(EMA(EMA))``."""
    h = np.asarray(history, dtype=float)
    if h.shape[-1] == 0:
        raise ValueError("empty history")
    window = window or k
    n = h.shape[-1]
    e1 = _ema_tail(h, k, mode, window, min(n, 2 * window - 1))
    e2 = _ema_tail(e1, k, mode, window, min(e1.shape[-1], window))
    return 3.0 * e1[..., -1] - 3.0 * e2[..., -1] + ema_next(e2, k, mode, window)


_NEXT = {"ema": ema_next, "dema": dema_next, "tema": tema_next}


@dataclass(frozen=True)
class MagpieMean:
    """Moving-average prior mean, updated as observations arrive."""

    k: int = 100
    variant: str = "ema"
    mode: str = "normalized"

    positive = ()
    needs_history = True

    def __post_init__(self):
        smoothing(self.k)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def alpha(self) -> float:
        return smoothing(self.k)

    def next(self, history):
        return _NEXT[self.variant](history, self.k, self.mode)

    def hypers(self):
        return {}

    def with_hypers(self, **hp):
        return self

    def __call__(self, t, y=None):
        """Prior mean at each training point given the observations before it.

        The first point has no history and is its own mean.
        """
        if y is None:
            raise ValueError("Magpie mean needs the observed history")
        y = np.asarray(y, dtype=float)
        out = np.empty_like(y)
        if len(y):
            out[0] = y[0]
        for i in range(1, len(y)):
            out[i] = self.next(y[max(0, i - 3 * self.k):i])
        return out

    def grads(self, t):
        return {}


@dataclass(frozen=True)
class DriftMean:
    """Parametric means: ``constant``, ``linear`` or ``brownian_drift``.

    ``brownian_drift`` is ``offset - t * sigma2 / 2``; its ``sigma2`` shares
    its name with the Brownian kernel so the two are fitted as one value.
    """

    kind: str = "constant"
    c: float = 0.0
    mu_s: float = 0.0
    s0: float = 0.0
    sigma2: float = 1.0
    offset: float = 0.0

    needs_history = False
    _names = {"constant": ("c",), "linear": ("mu_s", "s0"),
              "brownian_drift": ("sigma2", "offset")}

    def __post_init__(self):
        if self.kind not in self._names:
            raise ValueError(f"unknown mean kind {self.kind!r}")
        vals = [getattr(self, n) for n in self._names[self.kind]]
        if not np.all(np.isfinite(vals)):
            raise ValueError("mean parameters must be finite")

    @property
    def positive(self):
        return ("sigma2",) if self.kind == "brownian_drift" else ()

    def hypers(self):
        return {n: getattr(self, n) for n in self._names[self.kind]}

    def with_hypers(self, **hp):
        return replace(self, **{k: v for k, v in hp.items() if k in self._names[self.kind]})

    def __call__(self, t, y=None):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full(t.shape, self.c)
        if self.kind == "linear":
            return t * self.mu_s + self.s0
        return self.offset - t * self.sigma2 / 2.0

    def grads(self, t):
        t = np.asarray(t, dtype=float)
        one = np.ones(t.shape)
        if self.kind == "constant":
            return {"c": one}
        if self.kind == "linear":
            return {"mu_s": t.copy(), "s0": one}
        return {"sigma2": -t / 2.0, "offset": one}


def drift_mean(t, params: DriftMean):
    out = params(t)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class TaskDriftMean:
    """Per-task Brownian drift ``offset_p - t * sigma2 * kpp[p] / 2`` on a task-major stack."""

    offsets: tuple
    sigma2: float = 1.0
    kpp: tuple = ()

    positive = ("sigma2",)
    needs_history = False

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(float(o) for o in self.offsets))
        kpp = tuple(float(k) for k in self.kpp) or (1.0,) * len(self.offsets)
        if len(kpp) != len(self.offsets):
            raise ValueError("one diagonal entry per task is required")
        object.__setattr__(self, "kpp", kpp)

    def _names(self):
        return [f"offset{p}" for p in range(len(self.offsets))]

    def hypers(self):
        return {"sigma2": self.sigma2, **dict(zip(self._names(), self.offsets))}

    def with_hypers(self, **hp):
        offsets = tuple(hp.get(n, o) for n, o in zip(self._names(), self.offsets))
        return replace(self, offsets=offsets, sigma2=hp.get("sigma2", self.sigma2))

    def _split(self, t):
        t = np.asarray(t, dtype=float)
        return t.reshape(len(self.offsets), -1)

    def __call__(self, t, y=None):
        tt = self._split(t)
        out = np.array(self.offsets)[:, None] - tt * self.sigma2 * np.array(self.kpp)[:, None] / 2.0
        return out.ravel()

    def grads(self, t):
        tt = self._split(t)
        g = {"sigma2": (-tt * np.array(self.kpp)[:, None] / 2.0).ravel()}
        for p, name in enumerate(self._names()):
            e = np.zeros_like(tt)
            e[p] = 1.0
            g[name] = e.ravel()
        return g
