import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow-tier tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow tier: pass --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and fail on FAIL."""
    def emit(n, name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {n}  {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    def skip(n, name, reason):
        line = f"SKIP  criterion {n}  {name}: {reason}"
        _VERDICTS.append(line)
        print(line)
        pytest.skip(reason)

    emit.skip = skip
    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
