import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volt.timeseries import (DAILY_DT, SeriesError, TimeSeries, load_panel, load_series,
                             log_returns, make_grid, minutes_dt, to_log)

from conftest import write_csv


def series(values, dt=1.0):
    return TimeSeries(make_grid(len(values), dt).times, np.asarray(values, float), dt=dt)


class TestLoadSeries:
    def test_three_rows_with_dates(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["date", "close"],
                      [("2024-01-02", 10.0), ("2024-01-03", 10.5), ("2024-01-05", 11.0)])
        s = load_series(p, "date", "close")
        assert len(s) == 3
        np.testing.assert_allclose(s.times, [DAILY_DT, 2 * DAILY_DT, 3 * DAILY_DT])
        np.testing.assert_array_equal(s.values, [10.0, 10.5, 11.0])

    def test_numeric_times(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["time", "value"], [(0, 1.0), (1, 2.0), (2, 3.0)])
        assert len(load_series(p, dt=0.5)) == 3

    def test_empty_cell(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["time", "value"], [(0, 1.0), (1, ""), (2, 3.0)])
        with pytest.raises(SeriesError, match="unparsable cell at row 2"):
            load_series(p)

    def test_duplicate_timestamp(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["date", "value"],
                      [("2024-01-02", 1), ("2024-01-02", 2)])
        with pytest.raises(SeriesError, match="duplicate timestamp"):
            load_series(p, "date")

    def test_non_monotone(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["time", "value"], [(2, 1), (1, 2)])
        with pytest.raises(SeriesError, match="non-monotone"):
            load_series(p)

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["time", "price"], [(0, 1)])
        with pytest.raises(SeriesError, match="missing column 'value'"):
            load_series(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_series(tmp_path / "nope.csv")

    def test_uneven_numeric_spacing(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["time", "value"], [(0, 1), (1, 1), (3, 1)])
        with pytest.raises(SeriesError, match="evenly spaced"):
            load_series(p)

    def test_panel_missing_task_column(self, tmp_path):
        p = write_csv(tmp_path / "a.csv", ["time", "a", "b"], [(0, 1, 2), (1, 1, 2)])
        assert [s.label for s in load_panel(p, value_cols=["a", "b"])] == ["a", "b"]
        with pytest.raises(SeriesError, match="'c'"):
            load_panel(p, value_cols=["a", "c"])


class TestToLog:
    def test_identities(self):
        np.testing.assert_allclose(to_log(series([1.0, math.e])).values, [0.0, 1.0])

    def test_wind_convention(self):
        out = to_log(series([0.0, 0.0]), shift=1.0)
        np.testing.assert_array_equal(out.values, [0.0, 0.0])
        assert out.log_applied and out.shift == 1.0

    def test_nonpositive(self):
        with pytest.raises(SeriesError, match="nonpositive"):
            to_log(series([-2.0, 1.0]))

    def test_twice(self):
        with pytest.raises(SeriesError):
            to_log(to_log(series([1.0, 2.0])))

    @given(st.lists(st.floats(0.0, 1e6), min_size=1, max_size=30), st.floats(0.5, 10.0))
    def test_round_trip(self, values, shift):
        s = series(values)
        back = to_log(s, shift).to_raw()
        np.testing.assert_allclose(back.values, s.values, rtol=1e-12, atol=1e-12 * shift)


class TestLogReturns:
    def test_identities(self):
        np.testing.assert_allclose(log_returns(series([1.0, math.e, math.e])).returns, [1.0, 0.0])
        np.testing.assert_allclose(log_returns(series([2.0, 4.0])).returns, [math.log(2)])

    def test_too_short(self):
        with pytest.raises(SeriesError):
            log_returns(series([1.0]))

    def test_right_endpoint_times(self):
        r = log_returns(series([1.0, 2.0, 3.0], dt=0.5))
        np.testing.assert_allclose(r.times, [1.0, 1.5])

    @settings(max_examples=50)
    @given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=40))
    def test_telescoping(self, values):
        s = series(values)
        r = log_returns(s)
        assert math.log(values[0]) + np.sum(r.returns) == pytest.approx(math.log(values[-1]),
                                                                       abs=1e-9)


class TestGrid:
    def test_values(self):
        np.testing.assert_allclose(make_grid(3, 0.5).times, [0.5, 1.0, 1.5])

    def test_empty(self):
        assert len(make_grid(0, 1.0).times) == 0

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            make_grid(3, -1.0)

    @given(st.integers(0, 500), st.floats(1e-6, 10.0))
    def test_positive_uniform(self, n, dt):
        t = make_grid(n, dt).times
        assert np.all(t > 0)
        if n > 1:
            np.testing.assert_allclose(np.diff(t), dt, rtol=1e-9)

    def test_wind_dt(self):
        assert minutes_dt(5) == pytest.approx(5 / (365 * 24 * 60))


class TestTimeSeries:
    def test_invariants(self):
        with pytest.raises(SeriesError):
            TimeSeries(np.array([1.0, 1.0]), np.array([1.0, 2.0]))
        with pytest.raises(SeriesError):
            TimeSeries(np.array([1.0]), np.array([np.nan]))
        with pytest.raises(SeriesError):
            TimeSeries(np.array([]), np.array([]))
