import sys

import pytest

from spingap.potential import gaussian, quartic, smoothed_power
from spingap.single_site import solve_chemical_potential


@pytest.fixture(scope="session")
def gauss():
    return gaussian()


@pytest.fixture(scope="session")
def quart():
    return quartic()


@pytest.fixture(scope="session")
def quart_cos():
    return quartic(cos_amplitude=0.3)


@pytest.fixture(scope="session")
def tm_gauss(gauss):
    return solve_chemical_potential(gauss, 0.0)


@pytest.fixture(scope="session")
def tm_quart_cos0(quart_cos):
    return solve_chemical_potential(quart_cos, 0.0)


@pytest.fixture(scope="session")
def tm_quart_cos3(quart_cos):
    return solve_chemical_potential(quart_cos, 3.0)


@pytest.fixture(scope="session")
def tm_quart(quart):
    return solve_chemical_potential(quart, 0.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
