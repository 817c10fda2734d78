import pytest

# "criterion N: PASS|FAIL ..." lines recorded by the acceptance module
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: numbered acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def report():
    """Record one pass/fail line for criterion ``n``; returns ``passed``."""

    def _report(n: int, passed: bool, claim: str, detail: str = "") -> bool:
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}: {claim}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES[n] = line
        print(line)
        return passed

    return _report
