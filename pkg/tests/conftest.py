import numpy as np
import pytest

from posmask.synthetic import synthetic_vocab


@pytest.fixture
def vocab():
    return synthetic_vocab(40)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    ok = report.passed
    prev = _ACCEPTANCE.get(number)
    if prev is not None:
        ok = ok and prev[1]
        detail = "; ".join(d for d in (prev[2], detail) if d)
    _ACCEPTANCE[number] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
