import numpy as np
import pytest

from graftnet import tensor as T


@pytest.fixture
def f64():
    with T.default_dtype(np.float64), T.fresh_tape():
        yield


@pytest.fixture(autouse=True)
def _isolated_tape():
    with T.fresh_tape():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): one of the numbered acceptance criteria")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    if rep.when == "setup" and ok:
        return
    _ACCEPTANCE[n] = (title, _ACCEPTANCE.get(n, (title, True))[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title}")
