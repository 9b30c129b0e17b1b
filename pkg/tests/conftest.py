import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion (``ok=None`` is SKIP); returns ``ok``."""

    def add(cid: str, ok: bool | None, detail: str) -> bool | None:
        line = f"{'SKIP' if ok is None else 'PASS' if ok else 'FAIL'} {cid}: {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
