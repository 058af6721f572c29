from pathlib import Path

import numpy as np
import pytest

from cbma.data import BrainMask, VolumeGrid, ellipsoid_mask, load_foci_csv

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def table1():
    return load_foci_csv(DATA / "table1.csv")


@pytest.fixture(scope="session")
def mask4():
    """Desk-scale ellipsoid mask (4 mm voxels)."""
    return ellipsoid_mask(4.0)


def box_mask(n=11, size=2.0, origin=None):
    """All-true cube of n^3 voxels centered on the world origin."""
    origin = origin if origin is not None else (-(n - 1) * size / 2.0,) * 3
    return BrainMask(VolumeGrid((n, n, n), (size,) * 3, origin, np.ones((n, n, n), dtype=bool)))


@pytest.fixture(scope="session")
def cube():
    return box_mask()


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns ``ok`` so tests can assert on it."""

    def record(name, ok, detail="", status=None):
        status = status or ("PASS" if ok else "FAIL")
        line = f"{status}  {name}  {detail}".rstrip()
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
