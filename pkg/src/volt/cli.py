"""Command line interface: ``volt simulate | fit | forecast | evaluate``.

Settings come from dataclass defaults, then an optional INI file
(``--config``), then ``--section.key=value`` flags. ``--seed`` (default
``$VOLT_SEED`` or 0) seeds every command and is echoed into all metadata.

Exit codes: 0 success, 2 validation, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, artifact, eval as evaluation, gpcv, plotting, sde
from .gp import FitError, mll
from .kernels import GeodesicKernel, latlon_to_unit
from .timeseries import DAILY_DT, ReturnSeries, SeriesError, load_panel, load_series, to_log
from .volt import (ForecastConfig, ForecastEnsemble, MTVoltModel, VoltConfig, fit_mt_volt,
                   fit_volt, forecast, forecast_mt, model_id)

log = logging.getLogger("volt")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass
class DataSection:
    path: str = ""
    time_col: str = "time"
    value_col: str = "value"
    dt: float = DAILY_DT
    shift: float = 0.0


@dataclass
class ModelSection:
    mean: str = "constant"
    k: int = 100
    variant: str = "ema"
    ema_mode: str = "normalized"
    gpcv_steps: int = 500
    gpcv_lr: float = 0.1
    gp_steps: int = 500
    gp_lr: float = 0.1
    noise_init: float = 1e-4
    J: int = gpcv.N_VOL_SAMPLES
    volvol: str = "gpcv"


@dataclass
class ForecastSection:
    horizon: int = 100
    n_vol: int = 10
    n_data: int = 100
    theta: float = 0.0


@dataclass
class EvalSection:
    grid: str = "0.05:0.95:0.05"
    steps: str = "75-100"
    space: str = "log"
    method: str = "moment"


@dataclass
class MultitaskSection:
    tasks: str = ""
    intertask: str = "free"
    coords: str = ""
    eta: float = gpcv.LKJ_ETA


@dataclass
class SimulateSection:
    model: str = "joint"
    n: int = 500
    mu_s: float = 0.05
    sigma: float = 0.5
    alpha: float = 0.6
    rho: float = 0.0
    V0: float = 0.2
    S0: float = 100.0
    dt: float = DAILY_DT
    tasks: int = 3
    corr: str = ""


SECTIONS = {"data": DataSection, "model": ModelSection, "forecast": ForecastSection,
            "eval": EvalSection, "multitask": MultitaskSection, "simulate": SimulateSection}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    forecast: ForecastSection = field(default_factory=ForecastSection)
    eval: EvalSection = field(default_factory=EvalSection)
    multitask: MultitaskSection = field(default_factory=MultitaskSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    seed: int = 0

    def set(self, section: str, key: str, raw: str):
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown config key {section}.{key}")
        kind = {"int": int, "float": float}.get(types[key], str)
        try:
            value = kind(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None
        setattr(obj, key, value)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"seed": str(self.seed)}
        for name in SECTIONS:
            cp[name] = {k: str(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    # downstream objects; their validation errors are reported with the section name

    def volt_config(self) -> VoltConfig:
        m = self.model
        with _section("model"):
            return VoltConfig(mean=m.mean, k=m.k, variant=m.variant, ema_mode=m.ema_mode,
                              gpcv_steps=m.gpcv_steps, gpcv_lr=m.gpcv_lr, gp_steps=m.gp_steps,
                              gp_lr=m.gp_lr, noise_init=m.noise_init, J=m.J, seed=self.seed,
                              volvol=m.volvol, eta=self.multitask.eta)

    def forecast_config(self) -> ForecastConfig:
        f = self.forecast
        with _section("forecast"):
            return ForecastConfig(f.horizon, f.n_vol, f.n_data, f.theta, self.seed)

    def eval_grid(self) -> np.ndarray:
        with _section("eval"):
            parts = [float(x) for x in self.eval.grid.split(":")]
            if len(parts) == 3:
                lo, hi, step = parts
                grid = np.round(np.arange(lo, hi + step / 2, step), 10)
            else:
                grid = np.asarray([float(x) for x in self.eval.grid.split(",")])
            if np.any(grid <= 0) or np.any(grid >= 1) or np.any(np.diff(grid) <= 0):
                raise ValueError("grid must be strictly increasing inside (0, 1)")
            return grid

    def eval_steps(self) -> tuple:
        with _section("eval"):
            lo, _, hi = self.eval.steps.partition("-")
            lo, hi = int(lo), int(hi or lo)
            if lo < 1 or hi < lo:
                raise ValueError("steps must look like 'start-end' with 1 <= start <= end")
            if self.eval.space not in ("log", "raw") or self.eval.method not in ("moment", "kde"):
                raise ValueError("space must be log|raw and method moment|kde")
            return lo, hi

    def task_columns(self) -> list:
        return [c.strip() for c in self.multitask.tasks.split(",") if c.strip()]

    def multitask_spec(self, P: int):
        mt = self.multitask
        with _section("multitask"):
            if mt.intertask not in ("free", "geodesic"):
                raise ValueError("intertask must be 'free' or 'geodesic'")
            if not mt.eta > 0:
                raise ValueError("eta must be positive")
            if mt.intertask == "free":
                return None, None
            pairs = [p for p in mt.coords.split(";") if p.strip()]
            if len(pairs) != P:
                raise ValueError(f"coords needs {P} 'lat,lon' pairs separated by ';'")
            latlon = np.array([[float(v) for v in p.split(",")] for p in pairs])
            return GeodesicKernel(1.0), latlon_to_unit(latlon[:, 0], latlon[:, 1])

    def sim_corr(self) -> np.ndarray:
        s = self.simulate
        with _section("simulate"):
            if not s.corr:
                return np.eye(s.tasks)
            rows = [[float(v) for v in r.split(",")] for r in s.corr.split(";")]
            if rows == [rows[0][:1]]:
                # one number: equicorrelated tasks
                return np.full((s.tasks, s.tasks), rows[0][0]) + (1.0 - rows[0][0]) * np.eye(s.tasks)
            return np.asarray(rows)


class _section:
    """Re-raise a ``ValueError`` with the config section prefixed."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and isinstance(exc, ValueError) and not isinstance(exc, ConfigError):
            raise ConfigError(f"[{self.name}] {exc}") from exc
        return False


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    cfg = RunConfig()
    env = os.environ.get("VOLT_SEED")
    if env is not None:
        cfg.seed = _int_seed(env, "VOLT_SEED")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"missing file: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"bad config file: {exc}") from None
        for section in cp.sections():
            for key, value in cp[section].items():
                if section == "run" and key == "seed":
                    cfg.seed = _int_seed(value, "run.seed")
                else:
                    cfg.set(section, key, value)
    for section, key, value in overrides:
        cfg.set(section, key, value)
    if seed is not None:
        cfg.seed = seed
    return cfg


def _int_seed(raw, name):
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigError(f"{name} must be nonnegative")
    return seed


def _parse_overrides(extra) -> list:
    """``--section.key=value`` or ``--section.key value`` tokens."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        name, eq, value = tok[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{name}")
            value = extra[i + 1]
            i += 1
        section, _, key = name.partition(".")
        out.append((section, key, value))
        i += 1
    return out


# -- output helpers ---------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows) -> Path:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    return artifact.atomic_write(path, "\n".join(lines) + "\n")


def _write_json(path, obj) -> Path:
    return artifact.atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_png(draw, path, *args, **kwargs) -> Path:
    path = Path(path)
    tmp = path.with_name(f".{path.stem}.tmp.png")
    try:
        draw(tmp, *args, **kwargs)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def _pct(p) -> str:
    return f"p{int(round(p * 100)):02d}"


# -- commands ---------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out, with_vol: bool = False) -> Path:
    s = cfg.simulate
    with _section("simulate"):
        if s.n < 1:
            raise ValueError("n must be >= 1")
        if s.model == "joint":
            params = sde.JointSDEParams(s.mu_s, s.sigma, s.V0, s.S0)
            runs = [sde.simulate_joint(params, s.n, s.dt, cfg.seed)]
        elif s.model == "sabr":
            params = sde.SABRParams(s.alpha, s.rho, s.V0, s.S0)
            runs = [sde.simulate_sabr(params, s.n, s.dt, cfg.seed)]
        elif s.model == "corr_sabr":
            params = sde.SABRParams(s.alpha, s.rho, s.V0, s.S0)
            runs = sde.simulate_corr_sabr(s.tasks, cfg.sim_corr(), params, s.n, s.dt, cfg.seed)
        else:
            raise ValueError("model must be joint, sabr or corr_sabr")
    if len(runs) == 1:
        names = ["value"]
        vol_names = ["volatility"]
    else:
        names = [f"task{p}" for p in range(len(runs))]
        vol_names = [f"volatility{p}" for p in range(len(runs))]
    header = ["time"] + names + (vol_names if with_vol else [])
    times = runs[0][0].times
    cols = [series.values for series, _ in runs]
    if with_vol:
        cols += [vol.values for _, vol in runs]
    rows = ([_fmt(t)] + [_fmt(c[i]) for c in cols] for i, t in enumerate(times))
    path = _write_csv(out, header, rows)
    print(f"simulated {s.n} rows ({s.model}) -> {path}  seed={cfg.seed}")
    return path


def _load_training(cfg: RunConfig, data_path):
    d = cfg.data
    with _section("data"):
        if not d.dt > 0:
            raise ValueError("dt must be positive")
        if d.shift < 0:
            raise ValueError("shift must be nonnegative")
    tasks = cfg.task_columns()
    if tasks:
        panel = load_panel(data_path, d.time_col, tasks, d.dt)
    else:
        panel = [load_series(data_path, d.time_col, d.value_col, d.dt)]
    if d.shift > 0:
        panel = [to_log(s, d.shift) for s in panel]
    return panel, tasks


def cmd_fit(cfg: RunConfig, data_path, out) -> Path:
    panel, tasks = _load_training(cfg, data_path)
    vcfg = cfg.volt_config()
    if tasks:
        intertask, coords = cfg.multitask_spec(len(panel))
        model = fit_mt_volt(panel, intertask, coords, vcfg)
        singles = list(model.tasks)
    else:
        model = fit_volt(panel[0], vcfg)
        singles = [model]
    summary = []
    for name, m in zip(tasks or [cfg.data.value_col], singles):
        y = m.data_gp.y
        returns = ReturnSeries(m.data_gp.x[1:], np.diff(y), m.dt)
        summary.append({"task": name, "sigma2": float(m.gpcv.sigma2),
                        "elbo": gpcv.elbo(m.gpcv, returns), "mll": mll(m.data_gp),
                        "noise": float(m.data_gp.noise)})
    meta = {"seed": cfg.seed, "data": str(data_path), "tasks": tasks or [cfg.data.value_col],
            "time_col": cfg.data.time_col, "n_train": len(panel[0]), "dt": cfg.data.dt,
            "model_id": model_id(model), "fit": summary, "version": __version__}
    path = artifact.save_model(model, out, meta)
    vol_png = Path(out).with_suffix(".vol.png")
    _write_png(plotting.vol_plot, vol_png, singles[0].volpath.times, singles[0].volpath.values,
               title=f"estimated volatility ({summary[0]['task']})")
    for row in summary:
        print(f"fit {row['task']}: sigma2={row['sigma2']:.4g} elbo={row['elbo']:.6g} "
              f"mll={row['mll']:.6g}  seed={cfg.seed}")
    print(f"model -> {path}")
    return path


def _write_ensemble(outdir: Path, ens: ForecastEnsemble, model, meta: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    H = ens.horizon
    paths = ens.paths
    buf = io.StringIO()
    buf.write("step,path_id,value\n")
    steps = np.tile(np.arange(1, H + 1), paths.shape[0])
    ids = np.repeat(np.arange(paths.shape[0]), H)
    np.savetxt(buf, np.column_stack([steps, ids]), fmt="%d,%d", delimiter=",")
    lines = buf.getvalue().splitlines()
    body = [f"{head},{_fmt(v)}" for head, v in zip(lines[1:], paths.ravel())]
    artifact.atomic_write(outdir / "paths.csv", "\n".join([lines[0]] + body) + "\n")
    grid = evaluation.PERCENTILES
    q = np.quantile(paths, grid, axis=0, method="linear")
    _write_csv(outdir / "fan.csv", ["step"] + [_pct(p) for p in grid],
               ([str(h + 1)] + [_fmt(v) for v in q[:, h]] for h in range(H)))
    _write_json(outdir / "meta.json", meta)
    hist = (model.data_gp.x, np.exp(model.data_gp.y) - model.shift)
    bands = {float(p): q[i] for i, p in enumerate(grid)}
    _write_png(plotting.fan_chart, outdir / "fan.png", ens.times, bands, history=hist,
               title=f"forecast {meta['task']}")


def cmd_forecast(cfg: RunConfig, model_path, out) -> Path:
    model, fit_meta = artifact.load_model(model_path)
    fcfg = cfg.forecast_config()
    out = Path(out)
    if isinstance(model, MTVoltModel):
        ensembles = forecast_mt(model, fcfg)
        singles = list(model.tasks)
    else:
        ensembles = [forecast(model, fcfg)]
        singles = [model]
    names = fit_meta.get("tasks") or [cfg.data.value_col]
    multi = len(ensembles) > 1
    for name, ens, m in zip(names, ensembles, singles):
        meta = {"seed": cfg.seed, "theta": ens.theta, "horizon": ens.horizon,
                "n_vol": ens.n_vol, "n_data": ens.n_data, "n_paths": ens.paths.shape[0],
                "shift": ens.shift, "model_id": ens.model_id, "task": name,
                "n_train": m.n, "dt": m.dt, "times": [float(t) for t in ens.times],
                "model": str(model_path), "version": __version__}
        _write_ensemble(out / name if multi else out, ens, m, meta)
    print(f"forecast {len(ensembles)} x {ensembles[0].paths.shape[0]} paths, "
          f"{fcfg.horizon} steps -> {out}  seed={cfg.seed} theta={fcfg.theta}")
    return out


def read_forecast(directory) -> tuple:
    """``(ensemble, meta)`` from a directory written by ``cmd_forecast``."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    raw = np.loadtxt(directory / "paths.csv", delimiter=",", skiprows=1, ndmin=2)
    H = int(meta["horizon"])
    values = raw[:, 2].reshape(-1, H)
    shift = float(meta.get("shift", 0.0))
    ens = ForecastEnsemble(np.asarray(meta["times"]), np.log(values + shift),
                           np.empty((int(meta["n_vol"]), 0)), int(meta["n_vol"]),
                           int(meta["n_data"]), int(meta["seed"]), float(meta["theta"]),
                           shift, meta.get("model_id", ""))
    return ens, meta


def _forecast_dirs(root: Path) -> list:
    if not root.is_dir():
        raise FileNotFoundError(f"missing forecast directory: {root}")
    if (root / "meta.json").is_file():
        return [root]
    dirs = sorted(p.parent for p in root.glob("*/meta.json"))
    if not dirs:
        raise ConfigError(f"no forecasts found in {root}")
    return dirs


def cmd_evaluate(cfg: RunConfig, forecast_dir, truth_path, out) -> dict:
    grid, steps = cfg.eval_grid(), cfg.eval_steps()
    forecasts, truths = [], []
    for d in _forecast_dirs(Path(forecast_dir)):
        ens, meta = read_forecast(d)
        col = meta["task"]
        series = load_series(truth_path, cfg.data.time_col, col, cfg.data.dt)
        n0, H = int(meta["n_train"]), ens.horizon
        if len(series) < n0 + H:
            raise ConfigError(f"truth {col!r} has {len(series)} rows; forecast {d.name} "
                              f"needs {n0 + H} (training {n0} + horizon {H})")
        truths.append(series.values[n0:n0 + H])
        forecasts.append(ens)
    report = evaluation.evaluate(forecasts, truths, grid, steps, cfg.eval.space, cfg.eval.method)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    artifact.atomic_write(out / "report.csv", report.to_csv())
    summary = {**report.summary(), "seed": cfg.seed, "nll_space": cfg.eval.space,
               "nll_method": cfg.eval.method, "nll_se_unit": "standard error over forecasts"}
    artifact.atomic_write(out / "summary.json", json.dumps(summary, sort_keys=True) + "\n")
    _write_png(plotting.calibration_plot, out / "calibration.png", report.grid, report.coverage,
               title=f"calibration, steps {steps[0]}-{steps[1]}")
    print(f"evaluated K={report.K}: calibration_error={report.calibration_error:.5f} "
          f"nll={summary['nll_mean']:.4f}  seed={cfg.seed} -> {out}")
    return summary


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volt", description=__doc__.splitlines()[0],
                                 epilog="Any setting can be overridden with --section.key=value.")
    ap.add_argument("--config", help="INI file with [data] [model] [forecast] [eval] "
                                     "[multitask] [simulate] sections")
    ap.add_argument("--seed", type=int, default=None, help="random seed (default $VOLT_SEED or 0)")
    ap.add_argument("--show-config", action="store_true", help="print the effective config and exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command")
    p = sub.add_parser("simulate", help="write a synthetic series CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--with-vol", action="store_true", help="add the true volatility column")
    p = sub.add_parser("fit", help="fit a model to a CSV series")
    p.add_argument("--data", help="input CSV (overrides data.path)")
    p.add_argument("--out", required=True, help="model artifact (.json)")
    p = sub.add_parser("forecast", help="sample forecast paths from a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p = sub.add_parser("evaluate", help="calibration, NLL and MAE of forecasts against truth")
    p.add_argument("--forecasts", required=True, help="forecast directory (or parent of several)")
    p.add_argument("--truth", required=True, help="CSV with the training rows and realized values")
    p.add_argument("--out", required=True, help="output directory")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _parse_overrides(extra), args.seed)
        if args.show_config:
            sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        if args.command is None:
            ap.print_usage(sys.stderr)
            return EXIT_VALIDATION
        if args.command == "simulate":
            cmd_simulate(cfg, args.out, args.with_vol)
        elif args.command == "fit":
            data = args.data or cfg.data.path
            if not data:
                raise ConfigError("no input: pass --data or set data.path")
            cmd_fit(cfg, data, args.out)
        elif args.command == "forecast":
            cmd_forecast(cfg, args.model, args.out)
        else:
            cmd_evaluate(cfg, args.forecasts, args.truth, args.out)
    except (FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"volt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        print(f"volt: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"volt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
