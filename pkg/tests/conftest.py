import pytest

_LINES = []


class AcceptanceLog:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(self, number: int, name: str, ok: bool, detail: str) -> bool:
        _LINES.append((number, f"[{'PASS' if ok else 'FAIL'}] {number:>2} {name}: {detail}"))
        return ok


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
