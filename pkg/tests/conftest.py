import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    measured = getattr(module, "MEASURED", None)
    if not measured:
        return
    terminalreporter.section("acceptance measurements")
    for key, value in measured.items():
        terminalreporter.write_line(f"{key}: {value}")
