import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line-per-criterion acceptance results after the test
    summary, where pytest's capture cannot swallow them."""
    for name, mod in sys.modules.items():
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(mod, "REPORT_LINES", [])
            if lines:
                terminalreporter.section("acceptance criteria")
                for line in lines:
                    terminalreporter.write_line(line)
            break
