import numpy as np
import pytest

from dampwave.attractor import find_equilibria
from dampwave.nonlinearity import polynomial
from dampwave.operator_core import DomainSpec, build_model


@pytest.fixture(scope="session")
def ref_model():
    return build_model(DomainSpec(1, (np.pi,), 512, 64))


@pytest.fixture(scope="session")
def small_model():
    return build_model(DomainSpec(1, (np.pi,), 128, 16))


@pytest.fixture(scope="session")
def ci():
    # 2u - u^3 with the declared dissipativeness pair
    return polynomial({1: 2.0, 3: -1.0}, mu=4.0, c=1.0)


@pytest.fixture(scope="session")
def ref_equilibria(ref_model, ci):
    return find_equilibria(ref_model, ci)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the run
VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    def record(number, ok, detail=""):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS][number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
