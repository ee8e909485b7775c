"""Web-Mercator conversion, bounding-box subsetting and precision coarsening."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .raster_io import GridHeader, Raster, center_lats, center_lons

EARTH_RADIUS = 6378137.0
MERCATOR_MAX_LAT = 85.06
MERCATOR_HALF_WORLD = math.pi * EARTH_RADIUS

MIN_DECIMALS = 2
MAX_DECIMALS = 6

# slack for cell centers that land on a box edge or bin edge through float error
_EDGE_EPS = 1e-9


class GeoError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        vals = (self.lat_min, self.lat_max, self.lon_min, self.lon_max)
        if not all(math.isfinite(v) for v in vals):
            raise GeoError("bounding box values must be finite")
        if not self.lat_min < self.lat_max:
            raise GeoError(f"lat_min ({self.lat_min}) must be < lat_max ({self.lat_max})")
        if not self.lon_min < self.lon_max:
            raise GeoError(f"lon_min ({self.lon_min}) must be < lon_max ({self.lon_max})")
        if self.lat_min < -90 or self.lat_max > 90:
            raise GeoError("latitudes must lie in [-90, 90]")
        if self.lon_min < -180 or self.lon_max > 180:
            raise GeoError("longitudes must lie in [-180, 180]")

    @classmethod
    def parse(cls, text: str) -> "BoundingBox":
        """Parse ``lat_min,lat_max,lon_min,lon_max``."""
        parts = text.split(",")
        if len(parts) != 4:
            raise GeoError(f"bbox needs 4 comma-separated numbers, got {text!r}")
        try:
            return cls(*(float(p) for p in parts))
        except ValueError as e:
            if isinstance(e, GeoError):
                raise
            raise GeoError(f"bbox has a non-numeric value: {text!r}") from None

    @classmethod
    def of(cls, h: GridHeader) -> "BoundingBox":
        """The full extent of a grid."""
        return cls(h.yll, h.ymax, h.xll, h.xmax)

    def as_list(self) -> list[float]:
        return [self.lat_min, self.lat_max, self.lon_min, self.lon_max]


class MercatorPoint(NamedTuple):
    x: float
    y: float


def to_web_mercator(lat: float, lon: float) -> MercatorPoint:
    """Spherical web-Mercator (EPSG:3857) coordinates in meters.

    y = R ln(tan(pi/4 + phi/2)) is evaluated as R asinh(tan(phi)), the same
    function, which is exact at the equator.
    """
    if not (math.isfinite(lat) and abs(lat) <= MERCATOR_MAX_LAT):
        raise GeoError(f"latitude {lat} outside the web-Mercator band |lat| <= {MERCATOR_MAX_LAT}")
    if not (math.isfinite(lon) and abs(lon) <= 180):
        raise GeoError(f"longitude {lon} outside [-180, 180]")
    x = EARTH_RADIUS * math.radians(lon)
    y = EARTH_RADIUS * math.asinh(math.tan(math.radians(lat)))
    return MercatorPoint(x, y)


_MERCATOR_MAX_Y = to_web_mercator(MERCATOR_MAX_LAT, 0.0).y


def from_web_mercator(p: MercatorPoint) -> tuple[float, float]:
    x, y = p
    if not (math.isfinite(x) and abs(x) <= MERCATOR_HALF_WORLD + 1e-6):
        raise GeoError(f"mercator x {x} outside world bounds")
    if not (math.isfinite(y) and abs(y) <= _MERCATOR_MAX_Y + 1e-6):
        raise GeoError(f"mercator y {y} outside world bounds")
    lon = math.degrees(x / EARTH_RADIUS)
    lat = math.degrees(math.atan(math.sinh(y / EARTH_RADIUS)))
    return lat, lon


def _inside(centers: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.nonzero((centers >= lo - _EDGE_EPS) & (centers <= hi + _EDGE_EPS))[0]


def subset(r: Raster, b: BoundingBox) -> Raster:
    """Cells whose centers fall inside ``b`` (bounds inclusive). Never resamples."""
    h = r.header
    cols = _inside(center_lons(h), b.lon_min, b.lon_max)
    rows = _inside(center_lats(h), b.lat_min, b.lat_max)
    if cols.size == 0 or rows.size == 0:
        raise GeoError(
            f"empty intersection: no cell centers of the {h.nrows}x{h.ncols} grid "
            f"fall inside bbox {b.as_list()}")
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    if (c0, c1, r0, r1) == (0, h.ncols, 0, h.nrows):
        return r
    nh = GridHeader(
        ncols=c1 - c0,
        nrows=r1 - r0,
        xll=h.xll + c0 * h.cellsize,
        yll=h.yll + (h.nrows - r1) * h.cellsize,
        cellsize=h.cellsize,
        nodata=h.nodata,
    )
    return Raster(nh, r.values[r0:r1, c0:c1])


def check_decimals(decimals: int) -> None:
    if not (isinstance(decimals, (int, np.integer)) and MIN_DECIMALS <= decimals <= MAX_DECIMALS):
        raise GeoError(f"decimals must be an integer in [{MIN_DECIMALS}, {MAX_DECIMALS}], "
                       f"got {decimals!r}")


def _bins(centers: np.ndarray, scale: int) -> tuple[np.ndarray, int]:
    """Bin index of each center on the 1/scale lattice, plus the lattice index of bin 0."""
    idx = np.floor(centers * scale + _EDGE_EPS).astype(np.int64)
    base = int(idx.min())
    return idx - base, base


def coarsen(r: Raster, decimals: int) -> Raster:
    """Aggregate to cells of 10**-decimals degrees by summing the data cells whose
    centers fall in each output cell.

    The output origin is a multiple of the target cellsize, so rasters coarsened
    to the same precision are cell-aligned. Bins are half-open ``[lo, hi)``.
    Per-bin sums run over the bin's values in sorted order, so the result does
    not depend on how the source rows are stored or visited.
    """
    check_decimals(decimals)
    h = r.header
    scale = 10 ** decimals
    target = 1.0 / scale
    if target < h.cellsize - 1e-12:
        raise GeoError(f"target cellsize {target} is finer than source cellsize {h.cellsize}")

    bx, x0 = _bins(center_lons(h), scale)
    by, y0 = _bins(center_lats(h), scale)
    ncols = int(bx.max()) + 1
    nrows = int(by.max()) + 1
    out_row = (nrows - 1 - by)  # per source row
    nh = GridHeader(ncols=ncols, nrows=nrows, xll=x0 / scale, yll=y0 / scale,
                    cellsize=target, nodata=h.nodata)

    vals = r.values
    mask = r.mask
    flat_bin = (out_row[:, None] * ncols + bx[None, :])[mask]
    data = vals[mask]
    out = np.full(nrows * ncols, h.nodata, dtype=np.float64)
    if data.size:
        order = np.lexsort((data, flat_bin))
        sb = flat_bin[order]
        sv = data[order]
        starts = np.concatenate(([0], np.nonzero(np.diff(sb))[0] + 1))
        sums = np.add.reduceat(sv, starts)
        out[sb[starts]] = sums
    return Raster(nh, out.reshape(nrows, ncols))


def cell_size_meters(decimals: int) -> float:
    """Equatorial arc length of one 10**-decimals degree cell edge."""
    check_decimals(decimals)
    return 10.0 ** -decimals * (math.pi * EARTH_RADIUS / 180.0)
