import numpy as np
import pytest

from coldloop import config
from coldloop.core import (
    TWO_PI,
    CouplingBudget,
    FeedbackFilter,
    FilterSection,
    LoopConfig,
    MeasurementChannel,
    MechanicalMode,
    NoiseInputs,
    OpticalCavity,
)


@pytest.fixture(scope="session")
def lhe_het():
    return config.load_reference("lhe_het")


@pytest.fixture(scope="session")
def lhe_only():
    return config.load_reference("lhe_only")


@pytest.fixture(scope="session")
def ln2_het():
    return config.load_reference("ln2_het")


def small_loop(f_hz=1.0e5, q=1e4, n_bath=50.0, s_imp=1e-4, g_fb=0.0, tau=2e-7, eps=0.0, higher=()):
    """A fast single-resonator loop with an ideal pi/2 filter at the mode."""
    mode = MechanicalMode.from_hz(f_hz, q)
    om = mode.omega_m
    filt = FeedbackFilter((FilterSection.resonator(om, 0.7),), g_fb, tau, eps)
    # rescale so |H(om)| = 1
    k = 1.0 / abs(filt.shaping(om))
    sec = filt.sections[0]
    filt = FeedbackFilter((FilterSection(tuple(k * b for b in sec.b), sec.a),), g_fb, tau, eps)
    return LoopConfig(mode, OpticalCavity(TWO_PI * 8.8e9, TWO_PI * 6.9e9),
                      CouplingBudget(TWO_PI * 2.24e5, 300.0, 0.5), NoiseInputs(n_bath, 0.0),
                      MeasurementChannel(s_imp), filt, tuple(higher))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, printed once at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
