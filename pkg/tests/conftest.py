"""Suite-wide wiring: runtime budget enforcement and the acceptance summary.

The wall clock starts at import (before collection) so the budget covers the
whole session. The terminal-summary hook re-prints one line per acceptance
check so the results stay visible under default output capture.
"""

import time

import helpers

T0 = time.perf_counter()
RUNTIME_BUDGET_S = 180.0


def _elapsed() -> float:
    return time.perf_counter() - T0


def pytest_sessionfinish(session, exitstatus):
    elapsed = _elapsed()
    within = elapsed < RUNTIME_BUDGET_S
    helpers.record_acceptance(
        12,
        "full test suite inside the runtime budget",
        within,
        f"{elapsed:.1f}s of {RUNTIME_BUDGET_S:.0f}s",
        echo=False,  # the terminal-summary section prints it
    )
    if not within and session.exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance checks")
    for index, label, passed, detail in sorted(helpers.ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"{index:02d} {status}  {label}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
