"""Shared pytest wiring: the release-gate verdict table.

The gate tests in test_acceptance.py record one verdict per check into a
module-level registry; after the run this hook prints the table so a log
reader sees every check's outcome on a single line each.
"""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None:
        return
    terminalreporter.write_sep("=", "release gate")
    for n in sorted(mod.LABELS):
        status, detail = mod.RESULTS.get(n, ("NOT RUN", ""))
        line = f"check {n:2d} [{mod.LABELS[n]}]: {status}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
