import numpy as np
import pytest
from threadpoolctl import threadpool_limits

# single-threaded BLAS for bit-reproducibility checks
_limits = threadpool_limits(limits=1)

_acceptance = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for name, value in report.user_properties:
        if name == "acceptance":
            _acceptance.append((value, report.outcome))


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            number, title = marker.args
            item.user_properties.append(("acceptance", (number, title, item.name)))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    by_criterion = {}
    for (number, title, test), outcome in _acceptance:
        entry = by_criterion.setdefault(number, [title, []])
        entry[1].append((test, outcome))
    for number in sorted(by_criterion):
        title, results = by_criterion[number]
        outcomes = {o for _, o in results}
        status = "FAIL" if "failed" in outcomes else ("SKIP" if outcomes == {"skipped"} else "PASS")
        terminalreporter.write_line(f"[{status}] {number:>2}. {title} ({len(results)} test{'s' if len(results) > 1 else ''})")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
