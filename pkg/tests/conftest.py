import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# acceptance bookkeeping: tests marked ``acceptance(id, title)`` get one
# PASS/FAIL line each in the terminal summary, whatever the capture mode.
_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    cid, title = marker.args
    if call.when == "setup" and call.excinfo is not None:
        _ACCEPTANCE[cid] = ("FAIL", title)
    elif call.when == "call":
        _ACCEPTANCE[cid] = ("PASS" if call.excinfo is None else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[cid]
        terminalreporter.write_line(f"{status} {cid} {title}")
