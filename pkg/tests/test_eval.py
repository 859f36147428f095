import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volt import eval as ev
from volt.volt import ForecastEnsemble


def ensemble(log_paths, shift=0.0):
    log_paths = np.atleast_2d(log_paths)
    n, H = log_paths.shape
    return ForecastEnsemble(np.arange(1, H + 1) / 252, log_paths, np.ones((1, H)), 1, n, 0, 0.0,
                            shift)


class TestQuantile:
    def test_linear_interpolation(self):
        assert ev.quantile(np.arange(1, 101), 0.5) == 50.5
        assert ev.quantile(np.arange(1, 11), 0.99) == pytest.approx(9.91)

    def test_degenerate(self):
        assert ev.quantile(np.full(20, 3.0), 0.3) == 3.0

    def test_step_selection(self):
        x = np.column_stack([np.arange(5.0), 10 + np.arange(5.0)])
        assert ev.quantile(x, 0.5, step=2) == 12.0
        np.testing.assert_allclose(ev.quantile(x, 0.5), [2.0, 12.0])
        with pytest.raises(ValueError):
            ev.quantile(x, 0.5, step=3)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
    def test_bad_p(self, p):
        with pytest.raises(ValueError):
            ev.quantile(np.arange(3.0), p)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            ev.quantile(np.array([]), 0.5)


class TestCalibration:
    def test_self_consistent(self, rng):
        """Truths drawn from the forecast distribution give C_p close to p."""
        K, H = 2000, 5
        fc = [rng.normal(size=(200, H)) for _ in range(K)]
        truths = [rng.normal(size=H) for _ in range(K)]
        rep = ev.calibration_curve(fc, truths, steps=(1, H))
        assert np.max(np.abs(rep.coverage - rep.grid)) <= 0.05
        assert rep.K == K

    def test_truth_above_everything(self):
        rep = ev.calibration_curve([np.zeros((10, 3))], [np.full(3, 5.0)], steps=(1, 3))
        np.testing.assert_array_equal(rep.coverage, 0.0)
        rep = ev.calibration_curve([np.zeros((10, 3))], [np.full(3, -5.0)], steps=(1, 3))
        np.testing.assert_array_equal(rep.coverage, 1.0)

    def test_single_forecast_single_step_is_binary(self, rng):
        rep = ev.calibration_curve([rng.normal(size=(50, 1))], [[0.1]], steps=(1, 1))
        assert set(np.unique(rep.coverage)) <= {0.0, 1.0}

    def test_error_value(self):
        """C_p = 0.5 everywhere on the 0.05..0.95 grid gives mean (0.5 - p)^2 = 0.075."""
        rep = ev.CalibrationReport(ev.PERCENTILES, np.full(19, 0.5), np.empty(0), (1, 1), 1)
        assert rep.calibration_error == pytest.approx(0.075)

    def test_error_constant_offset(self):
        grid = ev.PERCENTILES
        cov = np.minimum(grid + 0.1, 1.0)
        rep = ev.CalibrationReport(grid, cov, np.empty(0), (1, 1), 1)
        expected = np.mean((cov - grid) ** 2)
        assert rep.calibration_error == pytest.approx(expected)
        assert expected < 0.01

    def test_window(self):
        x = np.tile(np.arange(10.0), (100, 1)) + np.linspace(-1, 1, 100)[:, None]
        truth = np.arange(10.0) + np.where(np.arange(10) < 5, 2.0, -2.0)
        early = ev.calibration_curve([x], [truth], steps=(1, 5))
        late = ev.calibration_curve([x], [truth], steps=(6, 10))
        assert np.all(early.coverage == 0.0) and np.all(late.coverage == 1.0)

    def test_window_beyond_horizon(self):
        with pytest.raises(ValueError, match="horizon"):
            ev.calibration_curve([np.zeros((5, 3))], [np.zeros(3)], steps=(2, 4))

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            ev.calibration_curve([np.zeros((5, 3))], [], steps=(1, 3))

    def test_grid_must_increase(self):
        with pytest.raises(ValueError):
            ev.CalibrationReport(np.array([0.5, 0.2]), np.zeros(2), np.empty(0), (1, 1), 1)

    def test_monotone_in_p(self, rng):
        fc = [rng.normal(size=(40, 4)) for _ in range(30)]
        truths = [rng.normal(0.3, 1.5, size=4) for _ in range(30)]
        rep = ev.calibration_curve(fc, truths, steps=(1, 4))
        assert np.all(np.diff(rep.coverage) >= 0)

    def test_csv_and_summary(self, rng):
        rep = ev.evaluate([ensemble(rng.normal(size=(30, 4)))], [np.exp(rng.normal(size=4))],
                          steps=(1, 4))
        lines = rep.to_csv().splitlines()
        assert lines[0] == "p,coverage,step_window" and len(lines) == 20
        assert lines[1].startswith("0.05,") and lines[1].endswith(",1-4")
        summ = rep.summary()
        assert summ["K"] == 1 and summ["nll_se"] is None and summ["step_window"] == [1, 4]


class TestNLL:
    def test_standard_normal(self):
        x = np.random.default_rng(0).standard_normal((200000, 1))
        val = ev.nll(ensemble(x), np.array([1.0]))
        assert float(val[0]) == pytest.approx(0.5 * np.log(2 * np.pi), abs=0.01)

    def test_degenerate_floor(self):
        val = ev.nll(ensemble(np.zeros((10, 1))), np.array([1.0]))
        assert float(val[0]) == pytest.approx(0.5 * (np.log(2 * np.pi) + np.log(1e-8)))

    def test_raw_minus_log(self, rng):
        e = ensemble(rng.normal(size=(100, 3)))
        truth = np.array([0.5, 1.2, 3.0])
        np.testing.assert_allclose(ev.nll(e, truth, "raw") - ev.nll(e, truth, "log"), np.log(truth))

    def test_kde_close_to_moment_for_gaussian(self, rng):
        e = ensemble(rng.normal(size=(20000, 1)))
        truth = np.array([np.exp(0.3)])
        assert float(ev.nll(e, truth, method="kde")[0]) == pytest.approx(
            float(ev.nll(e, truth)[0]), abs=0.02)

    def test_shift(self, rng):
        logs = rng.normal(size=(200, 2))
        truth = np.array([1.0, 2.0])
        shifted = ev.nll(ensemble(logs, shift=3.0), truth)
        plain = ev.nll(ensemble(logs), truth + 3.0)
        np.testing.assert_allclose(shifted, plain)

    @pytest.mark.parametrize("truth", [[0.0], [-1.0], [np.nan]])
    def test_invalid_truth(self, truth):
        with pytest.raises(ValueError):
            ev.nll(ensemble(np.zeros((3, 1))), np.array(truth))

    def test_bad_options(self):
        with pytest.raises(ValueError):
            ev.nll(ensemble(np.zeros((3, 1))), np.array([1.0]), space="lin")
        with pytest.raises(ValueError):
            ev.nll(ensemble(np.zeros((3, 1))), np.array([1.0]), method="hist")


class TestMAE:
    def test_value(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert ev.mae(x, np.array([2.0, 2.0])) == pytest.approx(0.5)

    def test_evaluate_pools(self, rng):
        fcs = [ensemble(rng.normal(size=(50, 6))) for _ in range(4)]
        truths = [np.exp(rng.normal(size=6)) for _ in range(4)]
        rep = ev.evaluate(fcs, truths, steps=(2, 5))
        assert len(rep.nll) == 4
        assert np.isfinite(rep.mae)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), a=st.sampled_from([0.5, 2.0, 4.0]), b=st.sampled_from([-2.0, 0.0, 1.0]))
def test_calibration_invariant_under_affine_maps(seed, a, b):
    """Linear-interpolation quantiles commute with increasing affine maps."""
    rng = np.random.default_rng(seed)
    fc = [rng.normal(size=(25, 3)) for _ in range(8)]
    truths = [rng.normal(size=3) for _ in range(8)]
    base = ev.calibration_curve(fc, truths, steps=(1, 3)).coverage
    moved = ev.calibration_curve([a * x + b for x in fc], [a * t + b for t in truths],
                                 steps=(1, 3)).coverage
    np.testing.assert_array_equal(moved, base)
