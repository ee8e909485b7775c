import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from simseed import geo
from simseed.geo import BoundingBox, GeoError, MercatorPoint
from simseed.raster_io import GridHeader, Raster

import oracles
from conftest import grid

# frozen from oracles.mercator_x / mercator_y (50-digit decimal evaluation)
X_180 = 20037508.342789243
Y_45 = 5621521.486192067
Y_TIRANA = 5061139.118730166
X_TIRANA = 2206352.3075226823


class TestMercator:
    def test_origin(self):
        assert geo.to_web_mercator(0, 0) == (0.0, 0.0)
        assert geo.from_web_mercator(MercatorPoint(0, 0)) == (0.0, 0.0)

    def test_antimeridian(self):
        x, y = geo.to_web_mercator(0, 180)
        assert x == pytest.approx(X_180, abs=1e-6)
        assert x == pytest.approx(20037508.342789244, abs=1e-6)
        assert y == 0

    def test_45_north(self):
        assert geo.to_web_mercator(45, 0).y == pytest.approx(Y_45, abs=1e-6)
        assert round(geo.to_web_mercator(45, 0).y, 2) == 5621521.49

    def test_tirana(self):
        x, y = geo.to_web_mercator(41.33, 19.82)
        assert x == pytest.approx(X_TIRANA, abs=1e-6)
        assert y == pytest.approx(Y_TIRANA, abs=1e-6)

    def test_frozen_values_match_oracle(self):
        assert float(oracles.mercator_x(180)) == pytest.approx(X_180, abs=1e-8)
        assert float(oracles.mercator_y(45)) == pytest.approx(Y_45, abs=1e-8)
        assert float(oracles.mercator_y(41.33)) == pytest.approx(Y_TIRANA, abs=1e-8)
        assert float(oracles.mercator_x(19.82)) == pytest.approx(X_TIRANA, abs=1e-8)

    def test_inverse_of_antimeridian(self):
        lat, lon = geo.from_web_mercator(MercatorPoint(20037508.342789244, 0))
        assert lat == pytest.approx(0, abs=1e-9)
        assert lon == pytest.approx(180, abs=1e-9)

    def test_tirana_round_trip(self):
        lat, lon = geo.from_web_mercator(geo.to_web_mercator(41.33, 19.82))
        assert abs(lat - 41.33) <= 1e-9 and abs(lon - 19.82) <= 1e-9

    @pytest.mark.parametrize("lat", [85.07, -86, 90, math.nan])
    def test_latitude_band(self, lat):
        with pytest.raises(GeoError):
            geo.to_web_mercator(lat, 0)

    def test_out_of_bounds_inverse(self):
        with pytest.raises(GeoError):
            geo.from_web_mercator(MercatorPoint(X_180 * 1.01, 0))
        with pytest.raises(GeoError):
            geo.from_web_mercator(MercatorPoint(0, 3e7))

    def test_round_trip_10k_points(self):
        rng = np.random.default_rng(3857)
        lats = rng.uniform(-85.06, 85.06, 10_000)
        lons = rng.uniform(-180, 180, 10_000)
        worst = 0.0
        for la, lo in zip(lats.tolist(), lons.tolist()):
            p = geo.to_web_mercator(la, lo)
            assert abs(p.x) <= geo.MERCATOR_HALF_WORLD + 1e-6
            b = geo.from_web_mercator(p)
            worst = max(worst, abs(b[0] - la), abs(b[1] - lo))
        assert worst <= 1e-9


class TestBoundingBox:
    def test_parse(self):
        assert BoundingBox.parse("41,42,19.5,20.5") == BoundingBox(41, 42, 19.5, 20.5)

    @pytest.mark.parametrize("text", ["1,2,3", "2,1,0,1", "0,1,1,0", "a,1,0,1", "-91,0,0,1",
                                      "0,1,170,181", "0,1,1,1"])
    def test_invalid(self, text):
        with pytest.raises(GeoError):
            BoundingBox.parse(text)


class TestSubset:
    def test_full_extent_is_identity(self):
        r = grid(np.arange(16.0).reshape(4, 4))
        assert geo.subset(r, BoundingBox.of(r.header)) == r

    def test_southwest_quadrant(self):
        r = grid(np.arange(16.0).reshape(4, 4))
        s = geo.subset(r, BoundingBox(0, 2, 0, 2))
        assert s.header == GridHeader(2, 2, 0.0, 0.0, 1.0)
        assert s.values.tolist() == [[8, 9], [12, 13]]

    def test_box_between_centers(self):
        r = grid(np.ones((4, 4)))
        with pytest.raises(GeoError, match="empty intersection"):
            geo.subset(r, BoundingBox(1.6, 2.4, 0, 4))

    def test_inclusive_bounds(self):
        r = grid(np.ones((4, 4)))
        s = geo.subset(r, BoundingBox(0.5, 0.5 + 1e-12, 0.5, 1.5))
        assert s.header.shape == (1, 2)

    def test_values_not_resampled(self):
        r = grid([[0.1, -9999], [0.3, 0.7]], xll=10, yll=40, cellsize=0.25)
        s = geo.subset(r, BoundingBox(40.0, 40.3, 10, 10.6))
        assert s.values.tolist() == [[0.3, 0.7]]


@st.composite
def grid_and_box(draw):
    nrows, ncols = draw(st.integers(1, 30)), draw(st.integers(1, 30))
    cs = draw(st.sampled_from([0.01, 0.005, 0.0025, 0.001]))
    xll = round(draw(st.floats(-20, 20)), 3)
    yll = round(draw(st.floats(-20, 20)), 3)
    h = GridHeader(ncols, nrows, xll, yll, cs)
    rng = np.random.default_rng(draw(st.integers(0, 2**32)))
    vals = rng.uniform(0, 50, (nrows, ncols))
    vals[rng.random((nrows, ncols)) < 0.1] = -9999
    r = Raster(h, vals)
    fy = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    fx = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    assume(fy[1] - fy[0] > 1e-6 and fx[1] - fx[0] > 1e-6)
    box = BoundingBox(yll + fy[0] * nrows * cs, yll + fy[1] * nrows * cs,
                      xll + fx[0] * ncols * cs, xll + fx[1] * ncols * cs)
    return r, box


@given(grid_and_box())
@settings(max_examples=200, deadline=None)
def test_subset_idempotent(case):
    r, box = case
    try:
        once = geo.subset(r, box)
    except GeoError:
        return
    assert geo.subset(once, box) == once


class TestCoarsen:
    def test_identity_when_aligned(self):
        r = grid([[1, 2], [3, -9999]], xll=19.5, yll=41.0, cellsize=0.01)
        assert geo.coarsen(r, 2) == r

    def test_four_cells_to_one(self):
        r = grid([[1, 2], [3, 4]], xll=0, yll=0, cellsize=0.0005)
        c = geo.coarsen(r, 3)
        assert c.header.shape == (1, 1)
        assert c.header.cellsize == 0.001
        assert c.values[0, 0] == 10

    def test_nodata_is_skipped(self):
        r = grid([[1, -9999], [3, 4]], cellsize=0.0005)
        assert geo.coarsen(r, 3).values[0, 0] == 8

    def test_all_nodata_bin_stays_nodata(self):
        r = grid([[-9999, -9999, 5, 5]], cellsize=0.005)
        c = geo.coarsen(r, 2)
        assert c.values.tolist() == [[-9999, 10]]

    def test_origin_snaps_down(self):
        r = grid(np.ones((3, 3)), xll=19.503, yll=41.004, cellsize=0.001)
        c = geo.coarsen(r, 2)
        assert (c.header.xll, c.header.yll) == (19.5, 41.0)
        assert c.total() == 9

    def test_same_precision_grids_align(self):
        a = geo.coarsen(grid(np.ones((7, 5)), xll=1.003, yll=2.001, cellsize=0.001), 2)
        b = geo.coarsen(grid(np.ones((4, 9)), xll=1.0005, yll=2.0075, cellsize=0.0005), 2)
        for h in (a.header, b.header):
            assert round(h.xll * 100) == pytest.approx(h.xll * 100, abs=1e-9)
            assert round(h.yll * 100) == pytest.approx(h.yll * 100, abs=1e-9)

    def test_finer_target_rejected(self):
        with pytest.raises(GeoError, match="finer"):
            geo.coarsen(grid([[1]], cellsize=0.01), 3)

    @pytest.mark.parametrize("d", [1, 7, 2.5])
    def test_decimals_range(self, d):
        with pytest.raises(GeoError, match=r"\[2, 6\]"):
            geo.coarsen(grid([[1]], cellsize=0.01), d)

    def test_independent_of_row_order(self):
        rng = np.random.default_rng(7)
        vals = rng.uniform(0, 50, (40, 40))
        r = grid(vals, xll=19.5, yll=41.0, cellsize=0.001)
        base = geo.coarsen(r, 2)
        # shuffle the source cells within each output bin
        perm = vals.copy()
        for i in range(0, 40, 10):
            for j in range(0, 40, 10):
                block = perm[i:i + 10, j:j + 10].ravel()
                perm[i:i + 10, j:j + 10] = rng.permutation(block).reshape(10, 10)
        again = geo.coarsen(grid(perm, xll=19.5, yll=41.0, cellsize=0.001), 2)
        assert np.array_equal(base.values, again.values)


@given(grid_and_box(), st.integers(2, 4))
@settings(max_examples=200, deadline=None)
def test_coarsen_conserves_mass(case, decimals):
    r, _ = case
    assume(10.0 ** -decimals >= r.header.cellsize - 1e-12)
    c = geo.coarsen(r, decimals)
    assert c.total() == pytest.approx(r.total(), rel=1e-6, abs=1e-9)
    assert (c.mask.sum() > 0) == (r.mask.sum() > 0)


class TestCellSize:
    def test_two_decimals(self):
        assert geo.cell_size_meters(2) == pytest.approx(1113.1949, abs=1e-3)

    def test_six_decimals(self):
        assert geo.cell_size_meters(6) == pytest.approx(0.11131949, abs=1e-7)

    def test_scaling(self):
        assert geo.cell_size_meters(2) / geo.cell_size_meters(3) == pytest.approx(10, rel=1e-12)
