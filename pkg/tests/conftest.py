"""Shared pytest wiring: prints the acceptance scoreboard after the run."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in results:
        terminalreporter.write_line(line)
