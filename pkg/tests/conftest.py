# filled by tests/test_acceptance.py: criterion number -> (title, passed, seconds, detail)
ACCEPTANCE: dict[int, tuple[str, bool, float, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, secs, detail = ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] {n}. {title} ({secs:.1f}s)"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
