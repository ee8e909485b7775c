"""Crop water pipeline: climate ingestion, per-cell PET/WR/WRSI, location and regional runs.

Climate grids arrive in the units of the source dataset and are normalized
here to the units :mod:`simseed.evapo` expects (degC, kPa, MJ m-2 day-1 with
net longwave positive outgoing, wind at 2 m, AET in mm/day).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .. import evapo, geo
from .._toml import load_toml
from ..evapo import ClimateError, ClimateRecord, CropSpec, SiteRecord, YearMonth
from ..raster_io import GridHeader, Raster, cell_center, load_grid, read_table_csv, \
    write_table_csv
from .jobs import CropJob, Outputs, RunLog, stage
from .plots import PlotSpec, emit_blank, emit_heatmap, emit_timeseries

log = logging.getLogger(__name__)

VARIABLES = ("tair", "qair", "swnet", "lwnet", "wind", "evap")
LOCATION_COLUMNS = ("month", "crop", "pet", "kc", "wr", "aet", "wrsi")
REGIONAL_COLUMNS = ("lat", "lon", "wrsi")
LOG_FILE = "run_log.txt"
COORD_DIGITS = 10

W_M2_TO_MJ_DAY = 0.0864
KG_M2_S_TO_MM_DAY = 86400.0

# accepted unit strings per variable; each maps a raw value to evapo units
_UNITS = {
    "tair": {"K": lambda v: v - 273.15, "C": lambda v: v, "degC": lambda v: v},
    "qair": {"kg kg-1": lambda v: v, "kg/kg": lambda v: v},
    "swnet": {"W m-2": lambda v: v * W_M2_TO_MJ_DAY, "MJ m-2 day-1": lambda v: v},
    "lwnet": {"W m-2": lambda v: v * W_M2_TO_MJ_DAY, "MJ m-2 day-1": lambda v: v},
    "wind": {"m s-1": lambda v: v, "m/s": lambda v: v},
    "evap": {"kg m-2 s-1": lambda v: v * KG_M2_S_TO_MM_DAY, "mm day-1": lambda v: v},
}


def derive_vapor_pressure(q: float, elevation_m: float) -> float:
    """Actual vapor pressure (kPa) from specific humidity (kg/kg) at ``elevation_m``."""
    if not (math.isfinite(q) and 0.0 <= q <= 0.05):
        raise ClimateError(f"specific humidity {q} outside [0, 0.05] kg/kg")
    p = evapo.atmospheric_pressure(elevation_m)
    return q * p / (0.622 + 0.378 * q)


@dataclass(frozen=True)
class VariableSpec:
    name: str
    path: str
    units: str
    direction: str = "up"
    height_m: float = 2.0

    def __post_init__(self):
        if self.units not in _UNITS[self.name]:
            raise ClimateError(f"variable {self.name}: unsupported units {self.units!r} "
                               f"(expected one of {sorted(_UNITS[self.name])})")
        if self.direction not in ("up", "down"):
            raise ClimateError(f"variable {self.name}: direction must be up or down")
        if self.height_m <= 0.1:
            raise ClimateError(f"variable {self.name}: measurement height must be > 0.1 m")

    def convert(self, v: float) -> float:
        v = _UNITS[self.name][self.units](v)
        if self.name == "lwnet" and self.direction == "down":
            v = -v
        if self.name == "wind":
            v = evapo.wind_at_2m(v, self.height_m)
        return v


class ElevationTable:
    """Point elevations; lookups snap to the nearest point (ties: north, then west)."""

    def __init__(self, lats, lons, elevs):
        self.lats = np.asarray(lats, dtype=np.float64)
        self.lons = np.asarray(lons, dtype=np.float64)
        self.elevs = np.asarray(elevs, dtype=np.float64)
        if not self.lats.size:
            raise ClimateError("elevation table is empty")
        # the order a tie resolves in: northernmost first, then westernmost
        self._order = np.lexsort((self.lons, -self.lats))

    @classmethod
    def load(cls, path) -> "ElevationTable":
        _, rows = read_table_csv(Path(path).read_text(encoding="utf-8"))
        try:
            return cls([float(r["lat"]) for r in rows], [float(r["lon"]) for r in rows],
                       [float(r["elevation_m"]) for r in rows])
        except (KeyError, ValueError) as e:
            raise ClimateError(f"{path}: elevation table needs lat,lon,elevation_m ({e})") \
                from None

    def at(self, lat: float, lon: float) -> float:
        d = (self.lats[self._order] - lat) ** 2 + (self.lons[self._order] - lon) ** 2
        # argmin returns the first minimum, i.e. the north/west-most of a tie
        return float(self.elevs[self._order[int(np.argmin(np.round(d, 12)))]])


def _snap(f: float) -> float:
    r = round(f)
    return float(r) if abs(f - r) < 1e-9 else f


def nearest_cell(h: GridHeader, lat: float, lon: float) -> tuple[int, int]:
    """(row, col) of the cell whose center is nearest; on a tie the north/west cell wins."""
    if not (h.xll <= lon <= h.xmax and h.yll <= lat <= h.ymax):
        raise ClimateError(f"location ({lat}, {lon}) outside the climate grid extent "
                           f"lat [{h.yll}, {h.ymax}], lon [{h.xll}, {h.xmax}]")
    fc = _snap((lon - h.xll) / h.cellsize)
    fr = _snap((h.ymax - lat) / h.cellsize)
    col = min(max(math.ceil(fc) - 1, 0), h.ncols - 1)
    row = min(max(math.ceil(fr) - 1, 0), h.nrows - 1)
    return row, col


class CellResult(NamedTuple):
    pet: float
    kc: float | None
    wr: float | None
    aet: float
    wrsi: float | None


@dataclass
class ClimateSource:
    """Monthly climate grids sharing one geometry, plus an elevation table."""
    root: Path
    variables: dict[str, VariableSpec]
    elevation: ElevationTable
    months: list[YearMonth]
    _grids: dict[tuple[str, YearMonth], Raster] = field(default_factory=dict, repr=False)
    header: GridHeader | None = None

    @classmethod
    def open(cls, spec) -> "ClimateSource":
        """``spec`` is a climate config (TOML) path or an offline fixture id."""
        if isinstance(spec, str) and spec.endswith("-fixture"):
            from ..fetch import offline_fixture
            spec = offline_fixture(spec)["config"]
        path = Path(spec)
        doc = load_toml(path)
        try:
            raw = doc["variables"]
            variables = {}
            for name in VARIABLES:
                if name not in raw:
                    raise ClimateError(f"{path}: variable {name!r} missing from [variables]")
                v = raw[name]
                variables[name] = VariableSpec(name, v["path"], v["units"],
                                               v.get("direction", "up"),
                                               float(v.get("height_m", 2.0)))
            elevation = ElevationTable.load(path.parent / doc["elevation"])
        except KeyError as e:
            raise ClimateError(f"{path}: missing key {e}") from None
        months = [YearMonth.parse(m) for m in doc.get("months", [])]
        return cls(path.parent, variables, elevation, months)

    def grid_path(self, name: str, ym: YearMonth) -> Path:
        return self.root / self.variables[name].path.format(month=str(ym))

    def load(self, months) -> None:
        """Read every variable for ``months`` and check that all grids share a geometry."""
        for ym in months:
            missing = [v for v in VARIABLES if not self.grid_path(v, ym).is_file()]
            if missing:
                raise ClimateError(f"month {ym}: missing climate grids for {', '.join(missing)}")
        for ym in months:
            for v in VARIABLES:
                if (v, ym) in self._grids:
                    continue
                r = load_grid(self.grid_path(v, ym))
                if self.header is None:
                    self.header = r.header
                elif (r.header.shape, r.header.xll, r.header.yll, r.header.cellsize) != \
                        (self.header.shape, self.header.xll, self.header.yll,
                         self.header.cellsize):
                    raise ClimateError(f"{self.grid_path(v, ym).name}: geometry differs from "
                                       "the other climate grids")
                self._grids[(v, ym)] = r

    def raw(self, name: str, ym: YearMonth, row: int, col: int) -> float | None:
        r = self._grids[(name, ym)]
        return float(r.values[row, col]) if r.mask[row, col] else None

    def site(self, row: int, col: int) -> SiteRecord:
        lat, lon = cell_center(self.header, row, col)
        return SiteRecord(lat, lon, self.elevation.at(lat, lon))

    def record(self, ym: YearMonth, row: int, col: int, site: SiteRecord) -> ClimateRecord | None:
        """Normalized inputs for one cell-month, or None when any input is nodata."""
        vals = {}
        for v in VARIABLES:
            x = self.raw(v, ym, row, col)
            if x is None:
                return None
            vals[v] = self.variables[v].convert(x)
        return ClimateRecord(
            year_month=ym,
            tair_c=vals["tair"],
            ea_kpa=derive_vapor_pressure(vals["qair"], site.elevation_m),
            net_sw=vals["swnet"],
            net_lw=vals["lwnet"],
            wind_2m=vals["wind"],
            # slight condensation (negative evaporation) counts as none
            aet_mm_day=max(vals["evap"], 0.0),
        )


def compute_cell(src: ClimateSource, ym: YearMonth, row: int, col: int, crop: CropSpec,
                 cap: bool = False, site: SiteRecord | None = None) -> CellResult | None:
    """PET, Kc, WR, AET and monthly WRSI for one cell; None when the inputs hold nodata."""
    site = site or src.site(row, col)
    rec = src.record(ym, row, col, site)
    if rec is None:
        return None
    pet = evapo.penman_monteith(rec, site)
    kc = evapo.kc_for(crop, ym.month)
    if kc is None:
        return CellResult(pet, None, None, rec.aet_mm_day, None)
    wr = evapo.water_requirement(pet, kc)
    return CellResult(pet, kc, wr, rec.aet_mm_day, evapo.wrsi_monthly(rec.aet_mm_day, wr, cap))


def crop_specs(names, table: Path | None = None) -> list[CropSpec]:
    crops = (evapo.read_crop_table(Path(table).read_text(encoding="utf-8")) if table
             else evapo.default_crops())
    unknown = [n for n in names if n not in crops]
    if unknown:
        raise ClimateError(f"unknown crop(s) {', '.join(unknown)}; "
                           f"known: {', '.join(sorted(crops))}")
    return [crops[n] for n in names]


def _open_source(job: CropJob, months: list[YearMonth]) -> ClimateSource:
    src = ClimateSource.open(job.climate)
    src.load(months)
    return src


@dataclass
class CropResult:
    artifacts: list[Path] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _seasons(crop: CropSpec, months: list[YearMonth]) -> dict[YearMonth, list[YearMonth]]:
    out: dict[YearMonth, list[YearMonth]] = {}
    for ym in months:
        start = crop.season_start(ym)
        if start is not None:
            out.setdefault(start, []).append(ym)
    return out


def run_crop_location(job: CropJob, log: RunLog | None = None) -> CropResult:
    """Time series of PET, Kc, WR, AET and WRSI at the grid cell nearest (lat, lon)."""
    log = log or RunLog()
    months = [YearMonth.parse(m) for m in job.months]
    outputs = Outputs(job.out)
    result = CropResult()
    with outputs.guard():
        with stage("crops"):
            crops = crop_specs(job.crops, job.crop_table)
        with stage("climate"):
            src = _open_source(job, months)
        with stage("locate"):
            row, col = nearest_cell(src.header, job.lat, job.lon)
            site = src.site(row, col)
        monthly: list[dict] = []
        seasonal: list[dict] = []
        series: dict[str, list[float | None]] = {}
        with stage("compute"):
            cells = {ym: {c.name: compute_cell(src, ym, row, col, c, job.cap, site)
                          for c in crops} for ym in months}
            for ym in months:
                for c in crops:
                    r = cells[ym][c.name]
                    if r is None:
                        monthly.append({"month": str(ym), "crop": c.name, "pet": None,
                                        "kc": evapo.kc_for(c, ym.month), "wr": None,
                                        "aet": None, "wrsi": None})
                    else:
                        monthly.append({"month": str(ym), "crop": c.name, **r._asdict()})
            for c in crops:
                series[c.name] = [cells[ym][c.name].wrsi if cells[ym][c.name] else None
                                  for ym in months]
                seasons = _seasons(c, months)
                if not seasons:
                    msg = f"crop {c.name} is dormant for every month in {months[0]}..{months[-1]}"
                    log_warning(result, msg)
                    continue
                for start, in_season in seasons.items():
                    rs = [cells[ym][c.name] for ym in in_season]
                    label = f"{in_season[0]}..{in_season[-1]}"
                    if any(r is None for r in rs):
                        seasonal.append({"month": label, "crop": c.name, "pet": None,
                                         "kc": None, "wr": None, "aet": None, "wrsi": None})
                        continue
                    days = sum(ym.days for ym in in_season)
                    wr = math.fsum(r.wr * ym.days for ym, r in zip(in_season, rs)) / days
                    aet = math.fsum(r.aet * ym.days for ym, r in zip(in_season, rs)) / days
                    pet = math.fsum(r.pet * ym.days for ym, r in zip(in_season, rs)) / days
                    seasonal.append({
                        "month": label, "crop": c.name, "pet": pet, "kc": None, "wr": wr,
                        "aet": aet,
                        "wrsi": evapo.wrsi_seasonal(
                            ((ym, r.aet, r.wr) for ym, r in zip(in_season, rs)), job.cap),
                    })
            log.step("crop/location", (len(months), len(crops)),
                     (len(monthly) + len(seasonal), len(LOCATION_COLUMNS)),
                     math.fsum(r["wr"] for r in monthly if r["wrsi"] is not None),
                     math.fsum(r["aet"] for r in monthly if r["wrsi"] is not None))
        with stage("write"):
            p = outputs.file("wrsi_location.csv")
            p.write_text(write_table_csv(monthly + seasonal, LOCATION_COLUMNS),
                         encoding="utf-8", newline="\n")
            result.artifacts.append(p)
        with stage("plot"):
            title = (f"WRSI at {geo_label(site.lat, site.lon)} "
                     f"({', '.join(c.name for c in crops)})")
            result.artifacts.append(emit_timeseries(
                series, [str(m) for m in months],
                PlotSpec(title, outputs.file(f"wrsi_timeseries.{job.plot_format}"))))
        result.artifacts.append(log.write(outputs.file(LOG_FILE), "crop/location"))
    return result


def geo_label(lat: float, lon: float) -> str:
    ns = "N" if lat >= 0 else "S"
    ew = "E" if lon >= 0 else "W"
    return f"{abs(lat):.4f}{ns} {abs(lon):.4f}{ew}"


def log_warning(result: CropResult, msg: str) -> None:
    log.warning(msg)
    result.warnings.append(msg)


def _region(h: GridHeader, bbox: geo.BoundingBox) -> tuple[range, range]:
    """Row and column ranges of the climate cells whose centers fall inside ``bbox``."""
    index = Raster(h, np.arange(h.nrows * h.ncols, dtype=np.float64).reshape(h.shape))
    sub = geo.subset(index, bbox)
    first = int(sub.values[0, 0])
    r0, c0 = divmod(first, h.ncols)
    return range(r0, r0 + sub.header.nrows), range(c0, c0 + sub.header.ncols)


def _regional_month(src: ClimateSource, ym: YearMonth, crop: CropSpec, rows: range,
                    cols: range, sites: dict, cap: bool) -> list[tuple[float, float, CellResult]]:
    out = []
    for i in rows:
        for j in cols:
            r = compute_cell(src, ym, i, j, crop, cap, sites[i, j])
            if r is None or r.wrsi is None:
                continue
            s = sites[i, j]
            out.append((round(s.lat, COORD_DIGITS), round(s.lon, COORD_DIGITS), r))
    return out


def run_crop_regional(job: CropJob, log: RunLog | None = None) -> CropResult:
    """One WRSI table and heatmap per month over the cells inside ``job.bbox``."""
    log = log or RunLog()
    months = [YearMonth.parse(m) for m in job.months]
    outputs = Outputs(job.out)
    result = CropResult()
    with outputs.guard():
        with stage("crops"):
            (crop,) = crop_specs(job.crops, job.crop_table)
        with stage("climate"):
            src = _open_source(job, months)
        with stage("subset"):
            rows, cols = _region(src.header, job.bbox)
            log.step("crop/regional/subset", src.header.shape, (len(rows), len(cols)),
                     src.header.nrows * src.header.ncols, len(rows) * len(cols))
            sites = {(i, j): src.site(i, j) for i in rows for j in cols}
        with stage("compute"):
            def work(ym):
                return _regional_month(src, ym, crop, rows, cols, sites, job.cap)
            if job.threads > 1:
                with ThreadPoolExecutor(job.threads) as pool:
                    per_month = list(pool.map(work, months))
            else:
                per_month = [work(ym) for ym in months]
        for ym, cells in zip(months, per_month):
            stem = f"wrsi_{crop.name}_{ym}"
            with stage(f"write[{ym}]"):
                p = outputs.file(f"{stem}.csv")
                p.write_text(write_table_csv([(la, lo, r.wrsi) for la, lo, r in cells],
                                             REGIONAL_COLUMNS), encoding="utf-8", newline="\n")
                result.artifacts.append(p)
                log.step(f"crop/regional/{stem}", (len(rows), len(cols)), (len(cells), 3),
                         math.fsum(r.wr for _, _, r in cells),
                         math.fsum(r.aet for _, _, r in cells))
            with stage(f"plot[{ym}]"):
                spec = PlotSpec(f"{crop.name} WRSI {ym}",
                                outputs.file(f"{stem}.{job.plot_format}"))
                if cells:
                    result.artifacts.append(emit_heatmap(
                        [(la, lo, r.wrsi) for la, lo, r in cells], spec,
                        cellsize=src.header.cellsize, value_label="WRSI"))
                else:
                    if evapo.kc_for(crop, ym.month) is None:
                        msg = f"{crop.name} is dormant in {ym}; no WRSI values"
                    else:
                        msg = f"no {crop.name} WRSI values in {ym} (all cells nodata)"
                    log_warning(result, msg)
                    result.artifacts.append(emit_blank(spec, msg))
        result.artifacts.append(log.write(outputs.file(LOG_FILE), "crop/regional"))
    return result


def run_crop(job: CropJob, log: RunLog | None = None) -> CropResult:
    if job.mode == "location":
        return run_crop_location(job, log)
    return run_crop_regional(job, log)
