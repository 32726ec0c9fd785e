"""Shared test plumbing: the acceptance gate collects its one-line verdicts
here so they survive pytest's output capture and land in the final summary."""

GATE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gate")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
