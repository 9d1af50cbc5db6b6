import numpy as np
import pytest

from busdiag.synthetic import write_synthetic_dataset

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config.addinivalue_line("markers", "slow: trains a network for minutes")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_runtest_logreport(report):
    n = getattr(report, "criterion", None)
    if n is None or not (report.when == "call" or report.outcome != "passed"):
        return
    _CRITERIA.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcomes = _CRITERIA[n]
        if "failed" in outcomes:
            word = f"FAIL ({outcomes.count('failed')} of {len(outcomes)} checks failed)"
        elif all(o == "skipped" for o in outcomes):
            word = "SKIP"
        else:
            word = "PASS"
        terminalreporter.write_line(f"criterion {n:>2}: {word}")


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("busi"), per_class=3, size=160, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
