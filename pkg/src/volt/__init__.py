"""Hierarchical Gaussian-process forecasting of stochastically evolving series.

Volatility is inferred with a Gaussian-process copula model (GPCV), its log
is modelled as Brownian motion, and the data GP uses the integrated
squared volatility as its kernel. Magpie moving-average means, multi-task
volatility models, an SDE simulator and calibration metrics complete the
package.
"""

__version__ = "0.1.0"

from .timeseries import (DAILY_DT, ReturnSeries, SeriesError, TimeGrid, TimeSeries,  # noqa: E402
                         load_panel, load_series, log_returns, make_grid, to_log)
from .gpcv import (GPCVModel, MTGPCVModel, VolatilityPath, estimate_vol, fit,  # noqa: E402
                   mt_estimate_vol, mt_fit, mt_intertask_correlation)
from .volt import (ForecastConfig, ForecastEnsemble, MTVoltModel, VoltConfig,  # noqa: E402
                   VoltModel, fit_baseline, fit_mt_volt, fit_volt, forecast,
                   forecast_baseline, forecast_mt, prior_simulate)
from .eval import (CalibrationReport, calibration_curve, calibration_error,  # noqa: E402
                   evaluate, mae, nll, quantile)
from .artifact import load_model, save_model  # noqa: E402

__all__ = [
    "DAILY_DT", "ReturnSeries", "SeriesError", "TimeGrid", "TimeSeries", "load_panel",
    "load_series", "log_returns", "make_grid", "to_log",
    "GPCVModel", "MTGPCVModel", "VolatilityPath", "estimate_vol", "fit", "mt_estimate_vol",
    "mt_fit", "mt_intertask_correlation",
    "ForecastConfig", "ForecastEnsemble", "MTVoltModel", "VoltConfig", "VoltModel",
    "fit_baseline", "fit_mt_volt", "fit_volt", "forecast", "forecast_baseline", "forecast_mt",
    "prior_simulate",
    "CalibrationReport", "calibration_curve", "calibration_error", "evaluate", "mae", "nll",
    "quantile", "load_model", "save_model",
]
