"""Shared pytest wiring for the suite.

The acceptance tests register one status line per criterion; the hook below
replays them after the run so the verdicts survive output capture.
"""

import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Callable fixture: record one ``PASS``/``FAIL`` line per criterion.

    Usage: ``acceptance_report("A1", ok, "detail text")``.  The line is
    printed immediately (visible with ``-s``) and replayed in the terminal
    summary regardless of capture settings.
    """

    def _record(tag, ok, detail=""):
        status = "PASS" if ok else "FAIL"
        line = f"[{tag}] {status}: {detail}" if detail else f"[{tag}] {status}"
        _ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria", sep="-")
    for line in _ACCEPTANCE_LINES:
        ok = "] PASS" in line
        terminalreporter.write_line(line, green=ok, red=not ok)
