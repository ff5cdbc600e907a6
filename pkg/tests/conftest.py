"""Shared pytest wiring: the acceptance verdict board.

test_acceptance.py appends one line per criterion to VERDICTS; the terminal
summary hook prints them as a block after the run so the pass/fail state of
every criterion is visible even when individual assertions are quiet.
"""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS):
        terminalreporter.write_line(line)
