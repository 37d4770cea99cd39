import sys

_fast_seconds = [0.0]


def pytest_runtest_logreport(report):
    if "montecarlo" not in report.keywords:
        _fast_seconds[0] += report.duration


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines(_fast_seconds[0]):
        terminalreporter.write_line(line)
