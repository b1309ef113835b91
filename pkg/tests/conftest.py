"""Acceptance reporting: one PASS/FAIL line per criterion at the end of the run."""

import pytest

_RESULTS = {}


class AcceptanceReport:
    def record(self, number, passed, detail):
        _RESULTS[number] = (passed, detail)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceReport()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  "
                                    f"{detail}")
