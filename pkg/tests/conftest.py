import pytest

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    def record(name, passed, detail):
        line = f"criterion {name}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
