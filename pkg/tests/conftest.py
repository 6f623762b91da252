import re

import pytest
import torch

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+[a-z]?)_(\w+)")
_results: dict[str, tuple[str, str]] = {}


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    number, name = m.group(1).lstrip("0"), m.group(2).replace("_", " ")
    failed = report.failed
    if report.when == "call" or failed:
        previous = _results.get(number, (name, "PASS"))[1]
        verdict = "FAIL" if failed or previous == "FAIL" else ("SKIP" if report.skipped else "PASS")
        _results[number] = (name, verdict)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results, key=lambda k: (int(k.rstrip("ab")), k)):
        name, verdict = _results[number]
        terminalreporter.write_line(f"criterion {number:>3} {verdict}  {name}")
