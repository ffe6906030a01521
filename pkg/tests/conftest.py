"""Shared test plumbing: the acceptance summary block.

Acceptance tests record one verdict line each; the terminal summary
prints the block after the run so the verdicts are visible whether or
not individual tests passed.
"""

ACCEPTANCE_LINES = []


def record_criterion(line):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
