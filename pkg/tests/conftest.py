import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid and rep.when == "call" \
                    or (outcome == "error" and "test_criterion_" in nodeid):
                number = int(nodeid.split("test_criterion_")[1][:2])
                lines.append((number, "PASS" if outcome == "passed" else "FAIL", nodeid))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, verdict, nodeid in sorted(lines):
            terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {nodeid}")
