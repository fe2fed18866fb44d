import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rulestate.datagen import GenConfig, generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_bench():
    """A 400-entity benchmark shared by tests that only read it."""
    return generate(GenConfig(J=400, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail):
    """Keep one line per acceptance criterion for the end-of-run summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
