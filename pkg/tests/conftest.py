ACCEPTANCE = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> None:
    """Store one acceptance outcome for the end-of-session summary."""
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number}. {title}  {detail}".rstrip())
