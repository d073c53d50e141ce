import glob
import os
import sys

import pytest


def _find_mkl_rt():
    roots = [os.path.join(sys.prefix, "lib"), "/usr/local/lib", "/usr/lib"]
    for root in roots:
        hits = sorted(glob.glob(os.path.join(root, "libmkl_rt.so*")))
        if hits:
            return hits[-1]
    return None


# pypardiso (test oracle only) needs to locate the MKL runtime
if "PYPARDISO_MKL_RT" not in os.environ:
    _mkl = _find_mkl_rt()
    if _mkl:
        os.environ["PYPARDISO_MKL_RT"] = _mkl


@pytest.fixture
def small_pair():
    from exmsfem.grid import build_nested

    return build_nested((6, 6, 6), (2, 2, 2))


# one PASS/FAIL line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
