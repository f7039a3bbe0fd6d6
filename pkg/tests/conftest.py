import pytest

_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number, title, ok, detail, elapsed=None, limit=None):
        timing = ""
        if elapsed is not None:
            timing = f" [{elapsed:.1f}s" + (f" / limit {limit:g}s]" if limit is not None else "]")
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} -- {detail}{timing}"
        _LINES.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
