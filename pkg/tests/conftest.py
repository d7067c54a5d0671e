"""Shared pytest hooks: print the acceptance-criteria scoreboard."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod is not None else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        slot = results[n]
        flag = "PASS" if slot["ok"] else "FAIL"
        detail = "; ".join(slot["detail"])
        terminalreporter.write_line(f"[criterion {n}] {flag} - {slot['title']}: {detail}")
