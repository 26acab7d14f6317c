import os
from pathlib import Path

ACCEPTANCE_LINES: dict[str, str] = {}

ARTIFACTS = Path(os.environ.get("DISENDIFF_ARTIFACTS", Path(__file__).resolve().parents[1] / "artifacts"))


def record_criterion(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[key] = f"{'PASS' if passed else 'FAIL'}  {key}: {detail}"
    print(ACCEPTANCE_LINES[key])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
