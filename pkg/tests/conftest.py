import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import gate  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not gate.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(gate.RESULTS):
        ok, detail = gate.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
