import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""
    def record(name: str, checks: list[tuple[str, bool]]):
        ok = all(passed for _, passed in checks)
        failed = [label for label, passed in checks if not passed]
        detail = "; ".join(label for label, _ in checks)
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        if failed:
            line += "  [failing: " + "; ".join(failed) + "]"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
