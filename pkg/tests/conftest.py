"""Acceptance bookkeeping: one PASS/FAIL/SKIP line per criterion at the end of the run."""

import pytest

_RESULTS: dict[int, tuple[str, str]] = {}
_DETAILS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Attach a measured value to the current criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")
    n = marker.args[0] if marker else None

    def add(text: str) -> None:
        if n is not None:
            _DETAILS.setdefault(n, []).append(text)

    return add


def pytest_runtest_logreport(report):
    if report.when not in ("setup", "call"):
        return
    n = next((m.args[0] for m in getattr(report, "criterion_markers", [])), None)
    if n is None:
        return
    if report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _RESULTS[n] = ("SKIP", reason.replace("Skipped: ", ""))
    elif report.failed:
        _RESULTS[n] = ("FAIL", "")
    elif report.when == "call":
        _RESULTS.setdefault(n, ("PASS", ""))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep.criterion_markers = list(item.iter_markers("criterion"))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, reason = _RESULTS[n]
        info = "; ".join(_DETAILS.get(n, [])) or reason
        tr.write_line(f"criterion {n:2d}: {status}" + (f"  ({info})" if info else ""))
