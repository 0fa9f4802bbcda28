import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion."""

    def _record(name: str, ok: bool, detail: str) -> bool:
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        print(_LINES[-1])
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
