import re

import pytest

ACCEPTANCE = re.compile(r"test_acceptance\.py::test_c(\d\d)_(\w+)")


@pytest.fixture
def detail(record_property):
    """Attach a one-line measurement summary to the acceptance report."""
    return lambda text: record_property("detail", text)


def pytest_terminal_summary(terminalreporter):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = ACCEPTANCE.search(getattr(rep, "nodeid", ""))
            if not m or rep.when not in ("call", "setup"):
                continue
            props = dict(getattr(rep, "user_properties", []))
            status = "PASS" if outcome == "passed" else "FAIL"
            lines[int(m.group(1))] = f"[{int(m.group(1)):2d}] {status}  {m.group(2)}: {props.get('detail', '')}"
    if lines:
        terminalreporter.section("acceptance")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
