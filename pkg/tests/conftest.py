CRITERIA = {}


def record(number, ok, detail=""):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    CRITERIA.setdefault(number, []).append((ok, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        for _, line in CRITERIA[number]:
            terminalreporter.write_line(line)
