from fractions import Fraction

import numpy as np
import pytest

from acim.maps import builtin


BUILTIN_NAMES = ("shifted_linear", "harmonic", "three_branch", "doubling", "conjugated_exp")
AFFINE_NAMES = ("shifted_linear", "harmonic", "three_branch", "doubling")


@pytest.fixture(scope="session")
def maps():
    return {name: builtin(name) for name in BUILTIN_NAMES}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def half_indicator(value=2):
    """``value`` on [0, 1/2), zero elsewhere, with exact breakpoints."""
    from acim.transfer import StepDensity

    return StepDensity.indicator(0, Fraction(1, 2), value)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
