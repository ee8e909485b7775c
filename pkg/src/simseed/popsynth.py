"""Integer synthetic populations from real-valued population grids.

The real-valued cells are floored, the lost fractional mass is summed and
rounded, and the resulting whole people are handed back one each to the
most populous cells that were rounded down ("areas with lots of people get
more people").
"""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from contextlib import nullcontext
from typing import Callable, ContextManager, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import geo
from .raster_io import Raster, center_lats, center_lons, write_table_csv

log = logging.getLogger(__name__)

GENDERS = ("female", "male")
TABLE_COLUMNS = ("lat", "lon", "merc_x", "merc_y", "count")
ROSTER_COLUMNS = ("agent_id", "gender", "bracket", "age_years", "lat", "lon")


class StoreError(ValueError):
    pass


# -- integerization ---------------------------------------------------------

def allocation_order(values: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Positions of ``values`` sorted by (value desc, fractional part desc, id asc)."""
    frac = values - np.floor(values)
    return np.lexsort((ids, -frac, -values))


def allocate(values: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Integerize non-negative ``values`` whose cell identities are ``ids``.

    Returns integer counts aligned with ``values``. The result depends only on
    the (id, value) pairs, never on the order in which they are given.
    """
    values = np.asarray(values, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    if values.size and values.min() < 0:
        raise ValueError("population values must be non-negative")
    floors = np.floor(values)
    target = round(math.fsum(values.tolist()))
    deficit = target - int(floors.sum())
    assert deficit >= 0, "rounded total below the floored total"
    counts = floors.astype(np.int64)
    if deficit == 0:
        return counts

    frac = values - floors
    eligible = np.nonzero(frac > 0)[0]
    order = eligible[allocation_order(values[eligible], ids[eligible])]
    chosen = order[:deficit]
    counts[chosen] += 1
    spill = deficit - chosen.size
    if spill > 0:
        # unreachable for exact inputs: the rounded fractional mass never exceeds
        # the number of fractional cells. Fall back to the integral cells.
        rest = np.nonzero(frac == 0)[0]
        rest = rest[allocation_order(values[rest], ids[rest])]
        counts[rest[:spill]] += 1
    return counts


def integerize(r: Raster) -> Raster:
    """Whole-person version of ``r``; the data total becomes round-half-even(sum)."""
    mask = r.mask
    ids = np.flatnonzero(mask.ravel())
    vals = r.values.ravel()[ids]
    counts = allocate(vals, ids)
    out = r.values.copy().ravel()
    out[ids] = counts
    return r.with_values(out.reshape(r.values.shape))


# -- population tables -------------------------------------------------------

class PopulationRow(NamedTuple):
    lat: float
    lon: float
    merc_x: float
    merc_y: float
    count: int


@dataclass(frozen=True)
class PopulationTable:
    rows: tuple[PopulationRow, ...] = ()

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def total(self) -> int:
        return sum(r.count for r in self.rows)

    def coords(self) -> set[tuple[float, float]]:
        return {(r.lat, r.lon) for r in self.rows}

    def to_csv(self) -> str:
        return write_table_csv(self.rows, TABLE_COLUMNS)

    @classmethod
    def from_csv(cls, text: str) -> "PopulationTable":
        lines = text.splitlines()
        if not lines or lines[0].split(",") != list(TABLE_COLUMNS):
            raise StoreError(f"population table header must be {','.join(TABLE_COLUMNS)}")
        rows = []
        for n, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise StoreError(f"line {n}: expected 5 fields")
            lat, lon, mx, my = (float(p) for p in parts[:4])
            rows.append(PopulationRow(lat, lon, mx, my, int(parts[4])))
        return cls(tuple(rows))


def coord_digits(cellsize: float, decimals: int | None = None) -> int:
    """Decimal places that represent cell centers exactly on a 10**-k lattice."""
    if decimals is None:
        k = -math.log10(cellsize)
        if abs(k - round(k)) > 1e-9:
            return 10
        decimals = int(round(k))
    return decimals + 1


def make_population_table(r: Raster, keep_zeros: bool = False,
                          decimals: int | None = None) -> PopulationTable:
    """One row per populated data cell, north to south then west to east."""
    h = r.header
    vals = r.values
    mask = r.mask
    data = vals[mask]
    if data.size and not np.all(data == np.floor(data)):
        raise ValueError("population raster holds non-integer values; integerize it first")
    digits = coord_digits(h.cellsize, decimals)
    lats = [round(v, digits) for v in center_lats(h).tolist()]
    lons = [round(v, digits) for v in center_lons(h).tolist()]
    rows = []
    for i, j in zip(*np.nonzero(mask)):
        n = int(vals[i, j])
        if n == 0 and not keep_zeros:
            continue
        lat, lon = lats[i], lons[j]
        x, y = geo.to_web_mercator(lat, lon)
        rows.append(PopulationRow(lat, lon, x, y, n))
    rows.sort(key=lambda row: (-row.lat, row.lon))
    return PopulationTable(tuple(rows))


# -- demographic store -------------------------------------------------------

@dataclass(frozen=True)
class Bracket:
    label: str
    years: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.label or "/" in self.label or self.label.strip() != self.label:
            raise StoreError(f"bad bracket label {self.label!r}")
        if self.years is not None:
            lo, hi = self.years
            if not (0 <= lo <= hi):
                raise StoreError(f"bracket {self.label}: bad year range {self.years}")


@dataclass(frozen=True, order=True)
class DemographicKey:
    gender: str
    bracket: str

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise StoreError(f"gender must be one of {GENDERS}, got {self.gender!r}")

    @property
    def name(self) -> str:
        return f"{self.gender}_{self.bracket}"


@dataclass
class StoreManifest:
    country: str
    year: int | None
    decimals: int
    bbox: geo.BoundingBox
    genders: tuple[str, ...]
    brackets: tuple[Bracket, ...]
    groups: tuple[DemographicKey, ...]
    total: str | None = None

    def bracket(self, label: str) -> Bracket:
        for b in self.brackets:
            if b.label == label:
                return b
        raise StoreError(f"unknown bracket {label!r}")

    def to_json(self) -> str:
        doc = {
            "country": self.country,
            "year": self.year,
            "decimals": self.decimals,
            "bbox": self.bbox.as_list(),
            "genders": list(self.genders),
            "brackets": [
                {"label": b.label, "years": list(b.years) if b.years else None}
                for b in self.brackets
            ],
            "groups": [
                {"gender": k.gender, "bracket": k.bracket, "file": group_file(k)}
                for k in self.groups
            ],
            "total": self.total,
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StoreManifest":
        doc = json.loads(text)
        try:
            return cls(
                country=doc["country"],
                year=doc["year"],
                decimals=int(doc["decimals"]),
                bbox=geo.BoundingBox(*doc["bbox"]),
                genders=tuple(doc["genders"]),
                brackets=tuple(Bracket(b["label"], tuple(b["years"]) if b.get("years") else None)
                               for b in doc["brackets"]),
                groups=tuple(DemographicKey(g["gender"], g["bracket"]) for g in doc["groups"]),
                total=doc.get("total"),
            )
        except (KeyError, TypeError) as e:
            raise StoreError(f"malformed store manifest: {e}") from None


def group_file(key: DemographicKey) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.+-]", "_", key.bracket)
    return f"groups/{key.gender}_{safe}.csv"


@dataclass
class DemographicStore:
    manifest: StoreManifest
    tables: dict[DemographicKey, PopulationTable]
    total: PopulationTable | None = None

    def __post_init__(self):
        m = self.manifest
        labels = [b.label for b in m.brackets]
        if len(set(labels)) != len(labels):
            raise StoreError("duplicate bracket labels in manifest")
        if len(m.groups) != len(m.genders) * len(m.brackets):
            raise StoreError(f"store needs {len(m.genders)}x{len(m.brackets)} groups, "
                             f"has {len(m.groups)}")
        if set(m.groups) != set(self.tables):
            raise StoreError("group tables do not match the manifest group index")
        for k in m.groups:
            if k.bracket not in labels or k.gender not in m.genders:
                raise StoreError(f"group {k.name} not declared in manifest")

    def write(self, directory) -> list[Path]:
        d = Path(directory)
        (d / "groups").mkdir(parents=True, exist_ok=True)
        written = []
        for k in self.manifest.groups:
            p = d / group_file(k)
            p.write_text(self.tables[k].to_csv(), encoding="utf-8", newline="\n")
            written.append(p)
        if self.total is not None:
            p = d / (self.manifest.total or "total.csv")
            p.write_text(self.total.to_csv(), encoding="utf-8", newline="\n")
            written.append(p)
        p = d / "manifest.json"
        p.write_text(self.manifest.to_json(), encoding="utf-8", newline="\n")
        written.append(p)
        return written

    @classmethod
    def read(cls, directory) -> "DemographicStore":
        d = Path(directory)
        mpath = d / "manifest.json"
        if not mpath.is_file():
            raise StoreError(f"{d} is not a population store (no manifest.json)")
        m = StoreManifest.from_json(mpath.read_text(encoding="utf-8"))
        tables = {k: PopulationTable.from_csv((d / group_file(k)).read_text(encoding="utf-8"))
                  for k in m.groups}
        total = None
        if m.total:
            total = PopulationTable.from_csv((d / m.total).read_text(encoding="utf-8"))
        return cls(m, tables, total)


StepLogger = Callable[[str, tuple, tuple, float, float], None]
StageGuard = Callable[[str], ContextManager]


def population_steps(r: Raster, bbox: geo.BoundingBox, decimals: int, keep_zeros: bool = False,
                     step: StepLogger | None = None, label: str = "",
                     guard: StageGuard | None = None) -> PopulationTable:
    """subset -> coarsen -> integerize -> table, reporting each step's mass.

    ``step`` receives (name, shape_in, shape_out, mass_in, mass_out) per step;
    ``guard(name)`` wraps each step, e.g. to tag failures with the step name.
    """
    suffix = f"[{label}]" if label else ""
    note = step or (lambda *a: None)
    guard = guard or (lambda name: nullcontext())
    with guard("subset" + suffix):
        sub = geo.subset(r, bbox)
    note("subset" + suffix, r.header.shape, sub.header.shape, r.total(), sub.total())
    with guard("coarsen" + suffix):
        coarse = geo.coarsen(sub, decimals)
    note("coarsen" + suffix, sub.header.shape, coarse.header.shape, sub.total(), coarse.total())
    with guard("integerize" + suffix):
        whole = integerize(coarse)
    note("integerize" + suffix, coarse.header.shape, whole.header.shape,
         coarse.total(), whole.total())
    with guard("table" + suffix):
        table = make_population_table(whole, keep_zeros=keep_zeros, decimals=decimals)
    note("table" + suffix, whole.header.shape, (len(table), len(TABLE_COLUMNS)),
         whole.total(), float(table.total()))
    return table


def build_demographics(group_rasters: Mapping[DemographicKey, Raster], bbox: geo.BoundingBox,
                       decimals: int, *, country: str = "", year: int | None = None,
                       brackets: Sequence[Bracket] | None = None, keep_zeros: bool = False,
                       threads: int = 1, step: StepLogger | None = None,
                       guard: StageGuard | None = None) -> DemographicStore:
    geo.check_decimals(decimals)
    if not group_rasters:
        raise StoreError("no demographic groups given")
    keys = list(group_rasters)
    first = group_rasters[keys[0]].header
    for k in keys[1:]:
        h = group_rasters[k].header
        if (h.ncols, h.nrows, h.xll, h.yll, h.cellsize) != \
                (first.ncols, first.nrows, first.xll, first.yll, first.cellsize):
            raise StoreError(f"group {k.name} grid geometry differs from {keys[0].name}")

    if brackets is None:
        brackets = tuple(Bracket(lbl) for lbl in dict.fromkeys(k.bracket for k in keys))
    genders = tuple(g for g in GENDERS if any(k.gender == g for k in keys))
    order = [DemographicKey(g, b.label) for g in genders for b in brackets]
    missing = [k.name for k in order if k not in group_rasters]
    if missing:
        raise StoreError(f"missing demographic groups: {', '.join(missing)}")

    def run(k):
        notes = []
        rec = (lambda *a: notes.append(a)) if step else None
        t = population_steps(group_rasters[k], bbox, decimals, keep_zeros, rec, k.name, guard)
        return t, notes

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, order))
    tables = {}
    for k, (t, notes) in zip(order, results):
        tables[k] = t
        for n in notes:
            step(*n)

    m = StoreManifest(country=country, year=year, decimals=decimals, bbox=bbox,
                      genders=genders, brackets=tuple(brackets), groups=tuple(order))
    return DemographicStore(m, tables)


# -- agents ------------------------------------------------------------------

@dataclass(frozen=True)
class AgentRecord:
    agent_id: int
    gender: str
    bracket: str
    age_years: int | None
    lat: float
    lon: float


def _group_agents(key: DemographicKey, gi: int, table: PopulationTable, bracket: Bracket,
                  seed: int, sample_ages: bool) -> list[tuple]:
    out = []
    for ri, row in enumerate(table.rows):
        if sample_ages:
            # one stream per (seed, group, row); copy c takes the c-th draw
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, gi, ri])))
            lo, hi = bracket.years
            ages = rng.integers(lo, hi, size=row.count, endpoint=True).tolist()
        else:
            ages = [None] * row.count
        for age in ages:
            out.append((key.gender, key.bracket, age, row.lat, row.lon))
    return out


def spawn_agents(store: DemographicStore, seed: int, sample_ages: bool = False,
                 threads: int = 1) -> list[AgentRecord]:
    """Expand every group table into one record per person, in manifest order."""
    m = store.manifest
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    if sample_ages:
        lacking = [b.label for b in m.brackets if b.years is None]
        if lacking:
            raise StoreError(f"age sampling needs year ranges for brackets: {', '.join(lacking)}")

    def run(item):
        gi, key = item
        return _group_agents(key, gi, store.tables[key], m.bracket(key.bracket), seed, sample_ages)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        chunks = list(pool.map(run, enumerate(m.groups)))
    agents = []
    for chunk in chunks:
        for rec in chunk:
            agents.append(AgentRecord(len(agents), *rec))
    return agents


def roster_csv(agents: Iterable[AgentRecord]) -> str:
    return write_table_csv(
        ((a.agent_id, a.gender, a.bracket, a.age_years, a.lat, a.lon) for a in agents),
        ROSTER_COLUMNS)


def pyramid(store: DemographicStore) -> list[tuple[str, str, int]]:
    """(gender, bracket, total) per group, in manifest order."""
    return [(k.gender, k.bracket, store.tables[k].total()) for k in store.manifest.groups]


# -- reconciliation ----------------------------------------------------------

@dataclass
class ConsistencyReport:
    cells: int
    max_abs: int
    mean_abs: float
    per_cell: list[tuple[float, float, int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "cells": self.cells,
            "max_abs_discrepancy": self.max_abs,
            "mean_abs_discrepancy": self.mean_abs,
            "per_cell": [list(c) for c in self.per_cell],
        }, indent=2) + "\n"


def _on_lattice(v: float, decimals: int) -> bool:
    x = v * 10 ** decimals - 0.5
    return abs(x - round(x)) < 1e-6


def consistency_report(store: DemographicStore, total: PopulationTable) -> ConsistencyReport:
    """Per-cell |sum of groups - total| over the union of populated cells."""
    k = store.manifest.decimals
    sums: dict[tuple[float, float], int] = {}
    for t in store.tables.values():
        for row in t.rows:
            sums[(row.lat, row.lon)] = sums.get((row.lat, row.lon), 0) + row.count
    totals = {(row.lat, row.lon): row.count for row in total.rows}
    for lat, lon in list(sums) + list(totals):
        if not (_on_lattice(lat, k) and _on_lattice(lon, k)):
            raise StoreError(f"cell ({lat}, {lon}) is not on the {k}-decimal grid")
    if sums and totals and not (sums.keys() & totals.keys()):
        raise StoreError("group and total tables share no cells; grids are misaligned")
    cells = sorted(sums.keys() | totals.keys(), key=lambda c: (-c[0], c[1]))
    per_cell = [(lat, lon, abs(sums.get((lat, lon), 0) - totals.get((lat, lon), 0)))
                for lat, lon in cells]
    diffs = [d for *_, d in per_cell]
    return ConsistencyReport(
        cells=len(cells),
        max_abs=max(diffs, default=0),
        mean_abs=math.fsum(diffs) / len(diffs) if diffs else 0.0,
        per_cell=per_cell,
    )
