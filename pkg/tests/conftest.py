import pytest

from acceptance_log import LINES


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def record():
    def _record(number: int, ok: bool, detail: str, gating: bool = True) -> bool:
        status = "PASS" if ok else ("FAIL" if gating else "FAIL (non-gating)")
        line = f"criterion {number}: {status} - {detail}"
        LINES.append(line)
        print(line)
        return ok

    return _record
