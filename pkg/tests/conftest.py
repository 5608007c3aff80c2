from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def acceptance_record():
    """Record one human-readable line per acceptance criterion."""

    def record(criterion: str, passed: bool, detail: str = ""):
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[criterion] = f"[{status}] {criterion}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split()[0].rstrip("."))):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
