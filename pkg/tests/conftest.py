import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest  # noqa: E402

from support import RESULTS, SMALL_CFG, blob_set  # noqa: E402


@pytest.fixture
def small_cfg():
    return SMALL_CFG


@pytest.fixture(scope="session")
def blobs():
    return blob_set()


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k[2:])):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {key}: {detail}")
