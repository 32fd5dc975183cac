import numpy as np
import pytest
import torch

from dmsn.synth_data import default_domain_specs, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Three domains, 12 images each."""
    return generate_dataset(default_domain_specs(12), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)))


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Callable recording one PASS/FAIL line per acceptance criterion."""

    def record(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({name}): {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
