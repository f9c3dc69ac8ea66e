"""Collects the per-criterion pass/fail lines emitted by the acceptance
suite and echoes them after the run, outside pytest's output capture."""

CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
