import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neuroforget import toydiff as td
from neuroforget.cli import PipelineConfig, train_model

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def default_cfg() -> PipelineConfig:
    return PipelineConfig().validate()


@pytest.fixture(scope="session")
def trained(default_cfg):
    """The default testbed model (trained once per session) and its loss curve."""
    return train_model(default_cfg)


@pytest.fixture(scope="session")
def schedule():
    return td.linear_schedule(50)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record (and print) one pass/fail line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        _CRITERIA[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
