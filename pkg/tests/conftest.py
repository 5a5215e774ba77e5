"""Shared pytest plumbing: the acceptance suite registers one result line per
criterion here, and the terminal summary prints them after the run so the
pass/fail ledger is visible even when every test passes."""

ACCEPTANCE_RESULTS: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, label, ok, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num:02d} {status}  {label}: {detail}")
