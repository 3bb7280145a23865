import numpy as np
import pytest

from lsfnet import synthetic


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.acceptance_lines

    def record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six classes, 60 train / 30 test videos of 20-60 rows each."""
    out = tmp_path_factory.mktemp("small_synthetic")
    spec = synthetic.SyntheticSpec(n_train=60, n_test=30, min_points=20, max_points=60, seed=3)
    train, test = synthetic.generate(out, spec)
    return out, train, test
