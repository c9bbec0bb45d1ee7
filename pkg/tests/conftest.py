import pytest

# acceptance lines collected by tests/test_acceptance.py, printed once at the end
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def _record(number, name, ok, detail="", flag=False):
        status = "FLAG" if flag else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {status} {name}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
    return _record
