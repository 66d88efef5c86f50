import numpy as np
import pytest

from adanvar.dynamics import lorenz_trajectory


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run full-scale acceptance criteria (hours on one core)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale run; needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="full-scale run; pass --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def lorenz():
    """The 2000-row default Lorenz-63 trajectory (warm-up 200, train 1600, test 200)."""
    return lorenz_trajectory(2000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
