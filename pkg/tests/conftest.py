import sys
from pathlib import Path

import numpy as np
import pytest

from simseed.fetch import offline_fixture
from simseed.raster_io import GridHeader, Raster

TESTS = Path(__file__).parent
GOLDEN = TESTS / "golden"
sys.path.insert(0, str(TESTS))  # for the oracles module


def grid(values, xll=0.0, yll=0.0, cellsize=1.0, nodata=-9999.0) -> Raster:
    """Raster from a nested list, row 0 north."""
    arr = np.asarray(values, dtype=np.float64)
    return Raster(GridHeader(arr.shape[1], arr.shape[0], xll, yll, cellsize, nodata), arr)


@pytest.fixture(scope="session")
def pop_fixture():
    return offline_fixture("pop-fixture")


@pytest.fixture(scope="session")
def climate_fixture():
    return offline_fixture("climate-fixture")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
