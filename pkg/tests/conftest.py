import numpy as np
import pytest

from pelee.detector import DetectorConfig, build_pelee_ssd
from pelee.models import build_mobilenet_v1, build_peleenet
from pelee.weights import init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def peleenet():
    return build_peleenet()


@pytest.fixture(scope="session")
def peleenet_weights(peleenet):
    return init_weights(peleenet, seed=0)


@pytest.fixture(scope="session")
def mobilenet():
    return build_mobilenet_v1()


@pytest.fixture(scope="session")
def pelee_ssd(peleenet):
    return build_pelee_ssd(peleenet, DetectorConfig())


@pytest.fixture(scope="session")
def pelee_ssd_weights(pelee_ssd):
    return init_weights(pelee_ssd, seed=0)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance criterion: prints a PASS/FAIL line, then asserts."""
    def record(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
