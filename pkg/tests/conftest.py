import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bdfusion.simulation import DeltaFlags, GenerativeCoefficients, generate_dataset, model_spec, true_theta

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FLAGS = DeltaFlags(ua=True, yam=False)


@pytest.fixture(scope="session")
def spec():
    return model_spec(FLAGS)


@pytest.fixture(scope="session")
def truth_theta():
    return true_theta(GenerativeCoefficients(), FLAGS)


@pytest.fixture(scope="session")
def small_main():
    return generate_dataset(200, seed=11, keep_u=False)


@pytest.fixture(scope="session")
def small_external():
    return generate_dataset(400, seed=12, keep_u=True)


def random_theta(spec, rng, scale=1.0):
    return rng.normal(0.0, scale, spec.dim)


ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    """Register one acceptance criterion outcome for the end-of-run summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: (int(str(t[0]).split("-")[0]), str(t[0]))):
            terminalreporter.write_line(line)
