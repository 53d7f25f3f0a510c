"""Shared fixtures; prints the acceptance summary at the end of a run."""
import pytest

# criterion number -> (title, passed, detail)
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def accept():
    """Record one acceptance criterion, then assert it."""

    def record(num: int, title: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[num] = (title, bool(passed), detail)
        assert passed, f"criterion {num} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {num:2d} {title}: {detail}")
