import re
from collections import defaultdict

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results = defaultdict(list)  # criterion number -> [(outcome, user properties)]


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    # record the call phase, or a setup/teardown phase that did not pass (skip, error)
    if m and (report.when == "call" or not report.passed):
        _results[int(m.group(1))].append((report.outcome, dict(report.user_properties)))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        outcomes = [o for o, _ in _results[n]]
        if all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        elif all(o in ("passed", "skipped") for o in outcomes):
            verdict = "PASS"
        else:
            verdict = "FAIL"
        notes = "; ".join(f"{k}={v}" for _, props in _results[n] for k, v in props.items())
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}" + (f"  [{notes}]" if notes else ""))
