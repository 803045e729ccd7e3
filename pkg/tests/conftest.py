import time

import pytest

# acceptance outcomes, filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
SUITE_LIMIT = 300.0
_START = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    if 9 in ACCEPTANCE:
        # the property criterion also bounds the wall time of the whole run
        elapsed = time.perf_counter() - _START
        ok, line = ACCEPTANCE[9]
        ACCEPTANCE[9] = (ok and elapsed < SUITE_LIMIT, f"{line}; session {elapsed:.0f}s")
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {k}: {line}")


@pytest.fixture(scope="session")
def acceptance():
    return ACCEPTANCE
