import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Record one acceptance line: ``record(k, passed, detail)``."""
    def _record(k, passed, detail):
        line = f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((k, line))
        print(line)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
