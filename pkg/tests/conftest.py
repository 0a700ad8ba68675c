import numpy as np
import pytest

from ecrl.autograd import set_default_dtype
from ecrl.config import RunConfig
from ecrl.data import generate_dataset


@pytest.fixture(autouse=True)
def float64_mode():
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """10 samples at T=16, D=8 on disk."""
    out = tmp_path_factory.mktemp("ds")
    cfg = RunConfig(T=16, D=8, seed=5)
    generate_dataset(cfg.synthetic(), 10, out)
    return out


def pytest_configure(config):
    config.acceptance_lines = []
    config.addinivalue_line("markers", "acceptance: acceptance criterion")


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line; lines are echoed now and again in the terminal summary."""
    def record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
