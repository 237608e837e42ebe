import os
import sys

import pytest

from vsquant.fixtures import write_fixture

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Directory holding the seeded three-layer network and its input."""
    out = tmp_path_factory.mktemp("fixture")
    write_fixture(str(out))
    return out


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL",
                              rep.duration))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, secs in sorted(lines, key=lambda t: int(t[0].split(".")[0])):
        terminalreporter.write_line(f"{verdict}  {name}  ({secs:.2f}s)")
