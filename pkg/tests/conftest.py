import numpy as np
import pytest

from volt import sde
from volt.timeseries import DAILY_DT, log_returns
from volt.volt import VoltConfig, fit_volt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def joint_series():
    """400 training days plus 100 held-out days from the joint SDE."""
    s, vol = sde.simulate_joint(sde.JointSDEParams(), 500, DAILY_DT, seed=11)
    return s, vol


@pytest.fixture(scope="session")
def fitted(joint_series):
    s, _ = joint_series
    return fit_volt(s.head(400), VoltConfig(gpcv_steps=200, gp_steps=200))


@pytest.fixture(scope="session")
def sabr_returns():
    s, vol = sde.simulate_sabr(sde.SABRParams(), 401, DAILY_DT, seed=3)
    return log_returns(s), vol


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")
    return path


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"acceptance #{number:<2d} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
