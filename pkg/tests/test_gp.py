import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volt.gp import (NOISE_FLOOR, Adam, GaussianPredictive, GPModel, fit_hypers, grad_check,
                     mll, mll_and_grad, model_objective, predict, sample)
from volt.kernels import BrownianKernel, MaternKernel, VoltKernel
from volt.means import DriftMean

LOG_2PI = np.log(2 * np.pi)


class FixedKernel:
    """Kernel defined by an explicit matrix over integer inputs."""

    positive = ()
    scale_param = None

    def __init__(self, K):
        self.K = np.asarray(K, float)

    def hypers(self):
        return {}

    def with_hypers(self, **hp):
        return self

    def __call__(self, x1, x2=None):
        i = np.asarray(x1, int)
        j = i if x2 is None else np.asarray(x2, int)
        return self.K[np.ix_(i, j)]

    def grads(self, x):
        return {}


def const(c=0.0):
    return DriftMean("constant", c=c)


def random_spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + 0.5 * np.eye(n)


class TestMLL:
    def test_standard_normal(self):
        m = GPModel(np.array([0.0]), np.array([0.0]), FixedKernel([[1.0]]), const(), 0.0)
        assert mll(m) == pytest.approx(-0.5 * LOG_2PI)
        m = GPModel(np.array([0.0]), np.array([1.0]), FixedKernel([[1.0]]), const(), 0.0)
        assert mll(m) == pytest.approx(-0.5 * LOG_2PI - 0.5)

    def test_dense_oracle(self, rng):
        K = random_spd(rng, 3)
        y = rng.normal(size=3)
        m = GPModel(np.arange(3.0), y, FixedKernel(K), const(0.4), 0.3)
        C = K + 0.3 * np.eye(3)
        r = y - 0.4
        oracle = -0.5 * r @ np.linalg.solve(C, r) - 0.5 * np.linalg.slogdet(C)[1] - 1.5 * LOG_2PI
        assert mll(m) == pytest.approx(oracle, rel=1e-12)

    def test_chain_rule(self, rng):
        for _ in range(5):
            n = 6
            t = np.sort(rng.uniform(0.1, 3, n))
            y = rng.normal(size=n)
            m = GPModel(t, y, BrownianKernel(0.8), const(0.2), 0.05)
            total = 0.0
            for i in range(n):
                sub = GPModel(t[:i], y[:i], m.kernel, m.mean, m.noise)
                p = predict(sub, t[i:i + 1], include_noise=True)
                total += -0.5 * (LOG_2PI + np.log(p.var[0]) + (y[i] - p.mean[0]) ** 2 / p.var[0])
            assert total == pytest.approx(mll(m), abs=1e-8)


class TestGradients:
    def test_quadratic(self):
        f = lambda x: (float(x @ x + 3 * x[0]), 2 * x + np.array([3.0, 0.0]))
        assert grad_check(f, np.array([0.3, -1.2])) <= 1e-8

    def test_mll_sigma_noise(self, rng):
        for _ in range(20):
            t = np.sort(rng.uniform(0.05, 2.0, 12))
            m = GPModel(t, rng.normal(size=12), BrownianKernel(rng.uniform(0.1, 2)),
                        const(rng.normal()), rng.uniform(0.01, 0.5))
            assert grad_check(*model_objective(m)) <= 1e-4

    def test_mll_volt_amplitude(self, rng):
        for _ in range(20):
            n = 15
            dt = 1 / 252
            k = VoltKernel(rng.uniform(0.1, 0.5, n), dt, rng.uniform(0.5, 2))
            m = GPModel(np.arange(1, n + 1) * dt, rng.normal(size=n) * 0.05, k,
                        DriftMean("linear", mu_s=0.1, s0=0.0), rng.uniform(1e-4, 1e-3))
            assert grad_check(*model_objective(m)) <= 1e-4

    def test_matern(self, rng):
        t = np.linspace(0, 1, 10)
        m = GPModel(t, np.sin(5 * t), MaternKernel(0.3, 1.5), const(), 0.01)
        assert grad_check(*model_objective(m)) <= 1e-4


class TestFit:
    def test_recovers_brownian_sigma2(self):
        """Median over 20 prior draws of the relative sigma2 error is small."""
        n, true = 400, 0.36
        t = np.arange(1, n + 1) / 252
        L = np.linalg.cholesky(true * np.minimum.outer(t, t))
        errs = []
        for seed in range(20):
            y = L @ np.random.default_rng(seed).standard_normal(n)
            m = GPModel(t, y, BrownianKernel(1.0), const(), 1e-4)
            fitted, _ = fit_hypers(m, 500, 0.1)
            errs.append(abs(fitted.kernel.sigma2 / true - 1))
        assert np.median(errs) <= 0.2

    def test_zero_variance_data(self):
        t = np.arange(1, 51) / 252
        m = GPModel(t, np.full(50, 2.0), BrownianKernel(1.0), const(2.0), 1e-4)
        fitted, trace = fit_hypers(m, 500, 0.1)
        assert fitted.noise < 1e-7
        tail = np.array(trace[-100:])
        assert np.all(np.diff(tail) >= -1e-6 * np.abs(tail[1:]))

    def test_zero_steps(self):
        m = GPModel(np.array([1.0, 2.0]), np.array([0.1, 0.3]), BrownianKernel(0.5), const(), 1e-3)
        fitted, trace = fit_hypers(m, 0)
        assert fitted == m and trace == []

    def test_final_not_worse(self, rng):
        t = np.arange(1, 101) / 252
        y = np.cumsum(rng.normal(size=100)) * 0.02
        m = GPModel(t, y, BrownianKernel(1.0), const(), 1e-4)
        fitted, trace = fit_hypers(m, 300)
        assert trace[-1] >= trace[0] - 1e-9
        assert fitted.kernel.sigma2 > 0 and fitted.noise >= NOISE_FLOOR

    def test_fixed_names(self):
        t = np.arange(1, 51) / 252
        m = GPModel(t, np.sin(t), BrownianKernel(0.7), const(), 1e-4)
        fitted, _ = fit_hypers(m, 50, fixed=("sigma2",))
        assert fitted.kernel.sigma2 == 0.7


class TestPredict:
    def test_interpolates(self, rng):
        t = np.array([0.5, 1.0, 2.0])
        y = rng.normal(size=3)
        m = GPModel(t, y, BrownianKernel(1.0), const(), 0.0)
        p = predict(m, t[1:2])
        assert p.mean[0] == pytest.approx(y[1], abs=1e-10)
        assert p.var[0] <= 1e-8

    def test_empty_training(self):
        m = GPModel(np.array([]), np.array([]), BrownianKernel(1.0), const(2.0))
        p = predict(m, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(p.mean, [2.0, 2.0])
        np.testing.assert_allclose(p.cov, [[1.0, 1.0], [1.0, 2.0]])

    def test_dense_oracle(self, rng):
        K = random_spd(rng, 8)
        y = rng.normal(size=5)
        m = GPModel(np.arange(5.0), y, FixedKernel(K), const(0.3), 0.2)
        p = predict(m, np.arange(5, 8))
        C = K[:5, :5] + 0.2 * np.eye(5)
        Kq = K[5:, :5]
        np.testing.assert_allclose(p.mean, 0.3 + Kq @ np.linalg.solve(C, y - 0.3), rtol=1e-10)
        np.testing.assert_allclose(p.cov, K[5:, 5:] - Kq @ np.linalg.solve(C, Kq.T), atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_posterior_variance_below_prior(self, seed):
        rng = np.random.default_rng(seed)
        t = np.sort(rng.uniform(0.1, 5, 6))
        q = rng.uniform(0.1, 8, 4)
        m = GPModel(t, rng.normal(size=6), BrownianKernel(rng.uniform(0.1, 3)), const(),
                    rng.uniform(0, 0.1))
        prior = m.kernel.diag(q) if hasattr(m.kernel, "diag") else np.diag(m.kernel(q))
        assert np.all(predict(m, q).var <= np.diag(m.kernel(q)) + 1e-10)
        assert prior is not None

    def test_recondition_on_sample(self, rng):
        t = np.array([0.2, 0.4, 0.6])
        y = rng.normal(size=3)
        m = GPModel(t, y, BrownianKernel(1.0), const(), 0.0)
        draw = sample(predict(m, np.array([0.8])), 1, 3)[0, 0]
        m2 = GPModel(np.append(t, 0.8), np.append(y, draw), m.kernel, m.mean, 0.0)
        assert predict(m2, np.array([0.8])).mean[0] == pytest.approx(draw, abs=1e-9)


class TestSample:
    def test_degenerate(self):
        p = GaussianPredictive(np.arange(3.0), np.array([1.0, 2.0, 3.0]), np.zeros((3, 3)))
        np.testing.assert_array_equal(sample(p, 5, 0), np.tile([1.0, 2.0, 3.0], (5, 1)))

    def test_scalar_mean(self):
        p = GaussianPredictive(np.zeros(1), np.array([1.5]), np.array([[4.0]]))
        x = sample(p, 10_000, 1)
        assert abs(x.mean() - 1.5) <= 4 * 2.0 / 100

    def test_deterministic(self):
        p = GaussianPredictive(np.zeros(2), np.zeros(2), np.eye(2))
        np.testing.assert_array_equal(sample(p, 4, 9), sample(p, 4, 9))


class TestAdam:
    def test_ascends_concave(self):
        opt = Adam(lr=0.1)
        x = np.array([3.0, -2.0])
        for _ in range(500):
            x = opt.step(x, -2 * x)
        assert np.max(np.abs(x)) < 1e-2
