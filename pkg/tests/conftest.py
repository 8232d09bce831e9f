def pytest_terminal_summary(terminalreporter):
    from test_acceptance import _LINES

    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
