"""ESRI ASCII grid and CSV exchange formats.

Rasters are corner-registered (``xllcorner``/``yllcorner``) and stored
row-major with row 0 as the northernmost row, the order in which ESRI ASCII
files list their rows.
"""
from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_NODATA = -9999.0

_EXTENT_TOL = 1e-9
_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
                "cellsize", "nodata_value")


class GridFormatError(ValueError):
    """Malformed ASCII grid input. ``lineno`` is 1-based, or None."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class GridHeader:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        problems = header_problems(self)
        if problems:
            raise ValueError("invalid grid header: " + "; ".join(problems))

    @property
    def xmax(self) -> float:
        return self.xll + self.ncols * self.cellsize

    @property
    def ymax(self) -> float:
        return self.yll + self.nrows * self.cellsize

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)


def header_problems(h: GridHeader) -> list[str]:
    out = []
    if not isinstance(h.ncols, (int, np.integer)) or h.ncols < 1:
        out.append(f"ncols must be a positive integer, got {h.ncols!r}")
    if not isinstance(h.nrows, (int, np.integer)) or h.nrows < 1:
        out.append(f"nrows must be a positive integer, got {h.nrows!r}")
    if not (math.isfinite(h.cellsize) and h.cellsize > 0):
        out.append(f"cellsize must be > 0, got {h.cellsize!r}")
    if not math.isfinite(h.nodata):
        out.append("NODATA_value must be finite")
    if not (math.isfinite(h.xll) and -180.0 <= h.xll < 180.0):
        out.append(f"xllcorner must lie in [-180, 180), got {h.xll!r}")
    if not (math.isfinite(h.yll) and -90.0 <= h.yll < 90.0):
        out.append(f"yllcorner must lie in [-90, 90), got {h.yll!r}")
    if not out:
        if h.xll + h.ncols * h.cellsize > 180.0 + _EXTENT_TOL:
            out.append("grid extends east of 180")
        if h.yll + h.nrows * h.cellsize > 90.0 + _EXTENT_TOL:
            out.append("grid extends north of 90")
    return out


class Raster:
    """Georeferenced grid of float64 values with a nodata sentinel.

    ``values`` is a read-only ``(nrows, ncols)`` array; row 0 is north.
    """

    __slots__ = ("header", "values")

    def __init__(self, header: GridHeader, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 1:
            if arr.size != header.ncols * header.nrows:
                raise ValueError(
                    f"expected {header.ncols * header.nrows} values, got {arr.size}")
            arr = arr.reshape(header.nrows, header.ncols)
        if arr.shape != header.shape:
            raise ValueError(f"values shape {arr.shape} does not match header {header.shape}")
        bad = ~np.isfinite(arr) & (arr != header.nodata)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValueError(f"non-finite value at row {r}, col {c}")
        arr.setflags(write=False)
        object.__setattr__(self, "header", header)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Raster is immutable")

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.values, other.values)

    def __repr__(self):
        h = self.header
        return (f"Raster({h.nrows}x{h.ncols}, xll={h.xll!r}, yll={h.yll!r}, "
                f"cellsize={h.cellsize!r})")

    @property
    def mask(self) -> np.ndarray:
        """True where the cell holds data."""
        return self.values != self.header.nodata

    def with_values(self, values) -> "Raster":
        return Raster(self.header, values)

    def total(self) -> float:
        """Exactly rounded sum of all data cells."""
        return math.fsum(self.values[self.mask].tolist())


def cell_center(h: GridHeader, row: int, col: int) -> tuple[float, float]:
    """(lat, lon) of the center of cell (row, col); row 0 is north."""
    if not (0 <= row < h.nrows and 0 <= col < h.ncols):
        raise IndexError(f"cell ({row}, {col}) outside {h.nrows}x{h.ncols} grid")
    lon = h.xll + (col + 0.5) * h.cellsize
    lat = h.yll + (h.nrows - row - 0.5) * h.cellsize
    return lat, lon


def center_lons(h: GridHeader) -> np.ndarray:
    return h.xll + (np.arange(h.ncols) + 0.5) * h.cellsize


def center_lats(h: GridHeader) -> np.ndarray:
    return h.yll + (h.nrows - np.arange(h.nrows) - 0.5) * h.cellsize


def format_number(v) -> str:
    """Shortest decimal that parses back to the same float; integral values print without a point."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if v.is_integer() and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _parse_number(tok: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise GridFormatError(f"non-numeric {what} {tok!r}", lineno) from None


def read_ascii_grid(text: str | Iterable[str]) -> Raster:
    """Parse an ESRI ASCII grid from a string or an iterable of lines."""
    lines = text.splitlines() if isinstance(text, str) else [ln.rstrip("\r\n") for ln in text]
    header: dict[str, str] = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if _is_number(key):
            break
        if key not in _HEADER_KEYS:
            raise GridFormatError(f"unknown header key {parts[0]!r}", i + 1)
        if len(parts) != 2:
            raise GridFormatError(f"header key {parts[0]!r} needs exactly one value", i + 1)
        if key in header:
            raise GridFormatError(f"duplicate header key {parts[0]!r}", i + 1)
        header[key] = (parts[1], i + 1)
        i += 1

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise GridFormatError(f"missing header key {key!r}", i + 1)

    def _int(key):
        tok, ln = header[key]
        try:
            return int(tok)
        except ValueError:
            raise GridFormatError(f"{key} must be an integer, got {tok!r}", ln) from None

    def _num(key):
        tok, ln = header[key]
        return _parse_number(tok, ln, key)

    ncols, nrows = _int("ncols"), _int("nrows")
    cellsize = _num("cellsize")
    if "xllcorner" in header and "xllcenter" not in header:
        xll = _num("xllcorner")
    elif "xllcenter" in header and "xllcorner" not in header:
        xll = _num("xllcenter") - cellsize / 2
    else:
        raise GridFormatError("exactly one of xllcorner/xllcenter is required", i + 1)
    if "yllcorner" in header and "yllcenter" not in header:
        yll = _num("yllcorner")
    elif "yllcenter" in header and "yllcorner" not in header:
        yll = _num("yllcenter") - cellsize / 2
    else:
        raise GridFormatError("exactly one of yllcorner/yllcenter is required", i + 1)
    nodata = _num("nodata_value") if "nodata_value" in header else DEFAULT_NODATA

    try:
        h = GridHeader(ncols, nrows, xll, yll, cellsize, nodata)
    except ValueError as e:
        raise GridFormatError(str(e), header["ncols"][1]) from None

    values = np.empty((nrows, ncols), dtype=np.float64)
    row = 0
    for j in range(i, len(lines)):
        parts = lines[j].split()
        if not parts:
            continue
        if row >= nrows:
            raise GridFormatError(f"more than nrows={nrows} data rows", j + 1)
        if len(parts) != ncols:
            raise GridFormatError(f"expected {ncols} values, found {len(parts)}", j + 1)
        for c, tok in enumerate(parts):
            v = _parse_number(tok, j + 1, "cell value")
            if not math.isfinite(v) and v != nodata:
                raise GridFormatError(f"non-finite cell value {tok!r}", j + 1)
            values[row, c] = v
        row += 1
    if row != nrows:
        raise GridFormatError(f"expected {nrows} data rows, found {row}", len(lines))
    return Raster(h, values)


def write_ascii_grid(r: Raster) -> str:
    h = r.header
    out = io.StringIO()
    out.write(f"ncols {h.ncols}\n")
    out.write(f"nrows {h.nrows}\n")
    out.write(f"xllcorner {format_number(h.xll)}\n")
    out.write(f"yllcorner {format_number(h.yll)}\n")
    out.write(f"cellsize {format_number(h.cellsize)}\n")
    out.write(f"NODATA_value {format_number(h.nodata)}\n")
    for row in r.values.tolist():
        out.write(" ".join(format_number(v) for v in row))
        out.write("\n")
    return out.getvalue()


def load_grid(path) -> Raster:
    """Read a grid file; ``.gz`` files are decompressed transparently."""
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rt", encoding="utf-8") as f:
            return read_ascii_grid(f.read())
    return read_ascii_grid(path.read_text(encoding="utf-8"))


def save_grid(r: Raster, path) -> None:
    Path(path).write_text(write_ascii_grid(r), encoding="utf-8", newline="\n")


def write_table_csv(rows: Iterable[Mapping | Sequence], schema: Sequence[str]) -> str:
    """Serialize records to CSV text with a header row and LF line endings.

    Records may be mappings keyed by column name or sequences in schema order.
    None becomes an empty field.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(schema)
    for n, rec in enumerate(rows):
        if isinstance(rec, Mapping):
            missing = [c for c in schema if c not in rec]
            if missing:
                raise KeyError(f"record {n} is missing column(s) {missing}")
            vals = [rec[c] for c in schema]
        else:
            vals = list(rec)
            if len(vals) != len(schema):
                raise KeyError(f"record {n} has {len(vals)} fields, schema has {len(schema)}")
        w.writerow(["" if v is None else v if isinstance(v, str) else format_number(v)
                    for v in vals])
    return buf.getvalue()


def read_table_csv(text: str) -> tuple[list[str], list[dict[str, str]]]:
    reader = csv.DictReader(io.StringIO(text))
    rows = list(reader)
    return list(reader.fieldnames or []), rows
