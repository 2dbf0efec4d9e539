import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Call with (number, passed, detail); lines are echoed live and repeated in the summary."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES.append(line)
        print("\n" + line, flush=True)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
