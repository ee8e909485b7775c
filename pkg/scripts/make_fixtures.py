"""Regenerate the synthetic offline fixtures under src/simseed/data/fixtures.

    python scripts/make_fixtures.py

Output is deterministic (fixed seeds, gzip mtime 0), so rerunning leaves the
checked-in files unchanged.
"""
import gzip
from pathlib import Path

import numpy as np

from simseed.raster_io import GridHeader, Raster, format_number, write_ascii_grid

ROOT = Path(__file__).resolve().parents[1] / "src" / "simseed" / "data" / "fixtures"

BRACKETS = [("0-9", 0, 9), ("10-19", 10, 19), ("20-29", 20, 29), ("30-39", 30, 39),
            ("40-49", 40, 49), ("50-59", 50, 59), ("60-69", 60, 69), ("70-79", 70, 79),
            ("80+", 80, 99)]
SHARES = [0.16, 0.15, 0.15, 0.14, 0.13, 0.11, 0.08, 0.05, 0.03]
MONTHS = ["2020-07", "2020-08", "2020-09"]


def write_gz(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as raw:
        with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as f:
            f.write(text.encode("utf-8"))


def population():
    rng = np.random.default_rng(20200101)
    h = GridHeader(ncols=200, nrows=200, xll=19.5, yll=41.0, cellsize=0.005)
    lon = h.xll + (np.arange(h.ncols) + 0.5) * h.cellsize
    lat = h.yll + (h.nrows - np.arange(h.nrows) - 0.5) * h.cellsize
    LON, LAT = np.meshgrid(lon, lat)

    def blob(clat, clon, peak, width):
        return peak * np.exp(-((LAT - clat) ** 2 + (LON - clon) ** 2) / (2 * width ** 2))

    dens = (blob(41.33, 19.82, 9.0, 0.03) + blob(41.55, 20.25, 3.0, 0.05)
            + blob(41.15, 19.95, 1.5, 0.08))
    dens += rng.gamma(0.6, 0.08, size=dens.shape)
    # lake in the north-west corner
    lake = (LAT - 41.9) ** 2 / 0.004 + (LON - 19.6) ** 2 / 0.006 < 1
    dens = np.round(dens, 2)
    dens[lake] = -9999.0
    root = ROOT / "pop"
    write_gz(root / "density.asc.gz", write_ascii_grid(Raster(h, dens)))

    for gender, gshare in (("female", 0.51), ("male", 0.49)):
        for (label, _, _), share in zip(BRACKETS, SHARES):
            noise = np.clip(1 + 0.15 * rng.standard_normal(dens.shape), 0, None)
            vals = np.round(np.where(lake, 0, dens) * gshare * share * noise, 3)
            vals[lake] = -9999.0
            write_gz(root / "groups" / f"{gender}_{label}.asc.gz",
                     write_ascii_grid(Raster(h, vals)))

    lines = [
        "# Synthetic demographic grids (1 x 1 degree, 0.005 degree cells).",
        'country = "ALB"',
        "year = 2020",
        'density = "density.asc.gz"',
        'groups = "groups/{gender}_{bracket}.asc.gz"',
        'genders = ["female", "male"]',
        "",
    ]
    for label, lo, hi in BRACKETS:
        lines += ["[[brackets]]", f'label = "{label}"', f"years = [{lo}, {hi}]", ""]
    (root / "demographics.toml").write_text("\n".join(lines), encoding="utf-8")


def climate():
    rng = np.random.default_rng(20200701)
    h = GridHeader(ncols=10, nrows=10, xll=2.0, yll=13.0, cellsize=0.1)
    lat = h.yll + (h.nrows - np.arange(h.nrows) - 0.5) * h.cellsize
    lon = h.xll + (np.arange(h.ncols) + 0.5) * h.cellsize
    LON, LAT = np.meshgrid(lon, lat)
    north = (LAT - 13.0)  # 0..1, drier to the north
    root = ROOT / "climate"
    for m, month in enumerate(MONTHS):
        fields = {
            "tair": np.round(299.0 + 3.0 * north + 0.8 * m + rng.normal(0, 0.3, LAT.shape), 2),
            "qair": np.round(0.0175 - 0.002 * north - 0.0005 * m
                             + rng.normal(0, 0.0002, LAT.shape), 5),
            "swnet": np.round(205.0 + 25.0 * north + 5 * m + rng.normal(0, 3, LAT.shape), 1),
            "lwnet": np.round(-45.0 - 12.0 * north + rng.normal(0, 2, LAT.shape), 1),
            "wind": np.round(np.clip(2.2 + 0.8 * north + rng.normal(0, 0.3, LAT.shape), 0, None),
                             2),
            "evap": np.round((3.8 - 1.6 * north - 0.4 * m + rng.normal(0, 0.2, LAT.shape))
                             / 86400.0, 9),
        }
        if month == "2020-08":
            fields["evap"][2, 7] = -9999.0
        for name, vals in fields.items():
            write_gz(root / f"{name}_{month}.asc.gz", write_ascii_grid(Raster(h, vals)))

    rows = ["lat,lon,elevation_m"]
    for i in range(20):
        for j in range(20):
            la = round(13.975 - 0.05 * i, 3)
            lo = round(2.025 + 0.05 * j, 3)
            z = round(210 + 120 * (la - 13) + 40 * np.sin(3 * lo) + rng.normal(0, 5))
            rows.append(f"{format_number(la)},{format_number(lo)},{z}")
    (root / "elevation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")

    lines = [
        "# Synthetic monthly climate fields over 13-14N, 2-3E in FLDAS-native units.",
        'elevation = "elevation.csv"',
        "months = [" + ", ".join(f'"{m}"' for m in MONTHS) + "]",
        "",
    ]
    specs = [("tair", "K", None), ("qair", "kg kg-1", None), ("swnet", "W m-2", None),
             ("lwnet", "W m-2", "down"), ("wind", "m s-1", None), ("evap", "kg m-2 s-1", None)]
    for name, units, direction in specs:
        lines += [f"[variables.{name}]", f'path = "{name}_{{month}}.asc.gz"', f'units = "{units}"']
        if direction:
            lines.append(f'direction = "{direction}"')
        if name == "wind":
            lines.append("height_m = 2.0")
        lines.append("")
    (root / "climate.toml").write_text("\n".join(lines), encoding="utf-8")


if __name__ == "__main__":
    population()
    climate()
