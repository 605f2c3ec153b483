import pytest

REPORT_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Dict ``criterion -> (passed, detail)`` printed in the terminal summary."""
    return request.config.stash.setdefault(REPORT_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(REPORT_KEY, {})
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(report):
        passed, detail = report[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
