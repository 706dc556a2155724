import numpy as np
import pytest

from promptseg.synthesis import SynthesisConfig
from promptseg.volume import PhantomSpec, make_phantom


def pytest_configure(config):
    config._criteria = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._criteria.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(PhantomSpec(dims=(32, 32, 32), seed=11))


@pytest.fixture(scope="session")
def phantom64():
    return make_phantom(PhantomSpec(seed=5))


@pytest.fixture
def desk_cfg():
    return SynthesisConfig.desk()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
