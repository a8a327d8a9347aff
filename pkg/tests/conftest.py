"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""
import pytest

_LINES = []


class Recorder:
    def __call__(self, criterion, checks: dict, detail: str = ""):
        ok = all(checks.values())
        parts = ", ".join(f"{name}={'ok' if v else 'FAIL'}" for name, v in checks.items())
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} [{parts}] {detail}".rstrip()
        _LINES.append(line)
        print(line)
        failed = [name for name, v in checks.items() if not v]
        assert not failed, f"criterion {criterion} failed sub-checks {failed}: {detail}"


@pytest.fixture
def record():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
