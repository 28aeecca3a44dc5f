"""Collects the acceptance verdict lines and prints them after the run."""

VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":").split("(")[0])):
            terminalreporter.write_line(line)
