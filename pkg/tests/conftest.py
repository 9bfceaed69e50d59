import pytest

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record and print a PASS/FAIL line, then assert."""

    def _report(criterion: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return _report
