"""Shared fixtures and the per-criterion summary for the acceptance suite."""

import pytest

from travag.eventlog import SimpleEventLog

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.passed:
            status, note = "PASS", ""
        elif report.skipped:
            status = "SKIP"
            note = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
        else:
            status, note = "FAIL", report.longreprtext.strip().splitlines()[-1] if report.longreprtext else ""
        number, title = marker.args
        _CRITERIA.setdefault(number, (title, []))[1].append((status, report.duration, note))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        title, parts = _CRITERIA[number]
        statuses = {status for status, _, _ in parts}
        status = "FAIL" if "FAIL" in statuses else "PASS" if "PASS" in statuses else "SKIP"
        duration = sum(d for _, d, _ in parts)
        note = "; ".join(dict.fromkeys(n for _, _, n in parts if n))
        line = f"criterion {number:>2} {status:<4} {title} ({duration:.1f} s)"
        if note:
            line += f" -- {note}"
        terminalreporter.write_line(line)


@pytest.fixture
def table1_log():
    """Four hospital variants with frequencies 15, 12, 5 and 2."""
    return SimpleEventLog(
        {
            ("register", "visit", "blood-test", "visit", "release"): 15,
            ("register", "blood-test", "visit", "release"): 12,
            ("register", "visit", "hospitalization", "surgery", "release"): 5,
            ("register", "visit", "blood-test", "blood-test", "release"): 2,
        }
    )


@pytest.fixture
def toy_log():
    """Two variants with frequencies 90 and 10."""
    return SimpleEventLog({("register", "visit", "release"): 90, ("register", "surgery", "release"): 10})
