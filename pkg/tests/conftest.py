import numpy as np
import pytest

from autoscvx import example_config, load_config
from autoscvx.ocp import build_reentry_problem
from autoscvx.vehicle import DEG, ControlMode, PathLimits, ReentryVehicle


@pytest.fixture(scope="session")
def config_a():
    return load_config(example_config("a"))


@pytest.fixture(scope="session")
def config_b():
    return load_config(example_config("b"))


@pytest.fixture(scope="session")
def spec_a(config_a):
    return build_reentry_problem(config_a)


@pytest.fixture(scope="session")
def spec_b(config_b):
    return build_reentry_problem(config_b)


@pytest.fixture(scope="session")
def bank_model():
    nfz = ((5 * DEG, 30 * DEG, 5 * DEG), (-6.5 * DEG, 50 * DEG, 5 * DEG))
    return ReentryVehicle(limits=PathLimits(nfz=nfz), mode=ControlMode.BANK_ONLY)


@pytest.fixture(scope="session")
def alpha_model():
    return ReentryVehicle(mode=ControlMode.BANK_ALPHA)


def random_states(rng, n, scales, v_range=(1500.0, 7500.0)):
    """Well-conditioned reentry states in internal units."""
    x = np.empty((n, 6))
    x[:, 0] = 1.0 + rng.uniform(20e3, 110e3, n) / scales.length_scale
    x[:, 1] = rng.uniform(-0.5, 0.5, n)
    x[:, 2] = rng.uniform(-1.2, 1.2, n)
    x[:, 3] = rng.uniform(*v_range, n) / scales.velocity_scale
    x[:, 4] = rng.uniform(-0.4, 0.2, n)
    x[:, 5] = rng.uniform(-np.pi, np.pi, n)
    return x


@pytest.fixture(scope="session")
def solved_a(spec_a):
    """Nominal self-tuning solve of Example A with its iteration history."""
    from autoscvx.engine import SolverSettings, autoscvx_solve
    from autoscvx.mission import make_settings, MethodSpec

    settings = make_settings(spec_a.config, MethodSpec.parse("auto"), None)
    assert isinstance(settings, SolverSettings)
    return autoscvx_solve(spec_a, settings=settings)


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the run summary."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
