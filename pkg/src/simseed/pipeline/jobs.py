"""Job configuration, the step log and output bookkeeping shared by both pipelines."""
from __future__ import annotations

import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

from .. import geo
from .._toml import load_toml
from ..popsynth import Bracket, DemographicKey, GENDERS, StoreError
from ..raster_io import format_number


class PipelineError(Exception):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage}: {cause}")


@contextmanager
def stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(name, e) from e


class RunLog:
    """``STEP <name>: in=<r×c> out=<r×c> mass_in=<v> mass_out=<v>`` lines."""

    def __init__(self, stream: TextIO | None = None):
        self.stream = sys.stdout if stream is None else stream
        self.lines: list[str] = []

    def step(self, name, shape_in, shape_out, mass_in, mass_out):
        line = (f"STEP {name}: in={shape_in[0]}×{shape_in[1]} out={shape_out[0]}×{shape_out[1]} "
                f"mass_in={format_number(mass_in)} mass_out={format_number(mass_out)}")
        self.lines.append(line)
        if self.stream is not False:
            print(line, file=self.stream, flush=True)

    def write(self, path: Path, prefix: str) -> Path:
        """Replace the ``prefix`` lines of an existing log with this run's lines."""
        kept = []
        if path.exists():
            kept = [ln for ln in path.read_text(encoding="utf-8").splitlines()
                    if ln and not ln.startswith(f"STEP {prefix}")]
        mine = [ln for ln in self.lines if ln.startswith(f"STEP {prefix}")]
        path.write_text("\n".join(kept + mine) + "\n", encoding="utf-8", newline="\n")
        return path


class Outputs:
    """Tracks files a run creates so a failed run can remove them."""

    def __init__(self, root):
        self.root = Path(root)
        self.created: list[Path] = []
        self._dirs: list[Path] = []

    def dir(self, rel: str = "") -> Path:
        d = self.root / rel if rel else self.root
        missing = []
        p = d
        while not p.exists():
            missing.append(p)
            p = p.parent
        d.mkdir(parents=True, exist_ok=True)
        self._dirs.extend(reversed(missing))
        return d

    def file(self, rel: str) -> Path:
        p = self.root / rel
        self.dir(str(Path(rel).parent) if Path(rel).parent != Path(".") else "")
        if not p.exists():
            self.created.append(p)
        return p

    def cleanup(self):
        for p in reversed(self.created):
            p.unlink(missing_ok=True)
        for d in reversed(self._dirs):
            try:
                d.rmdir()
            except OSError:
                pass

    @contextmanager
    def guard(self):
        try:
            yield self
        except BaseException:
            self.cleanup()
            raise


# -- demographic manifests ---------------------------------------------------

@dataclass
class DemographicSource:
    country: str
    year: int | None
    density: Path | None
    groups: dict[DemographicKey, Path]
    brackets: tuple[Bracket, ...]


def load_demographic_manifest(path) -> DemographicSource:
    """Read a demographic manifest (TOML); paths resolve against its directory."""
    path = Path(path)
    doc = load_toml(path)
    base = path.parent
    try:
        brackets = tuple(
            Bracket(str(b["label"]), tuple(b["years"]) if b.get("years") else None)
            for b in doc["brackets"])
        genders = tuple(doc.get("genders", GENDERS))
        template = doc["groups"]
    except (KeyError, TypeError) as e:
        raise StoreError(f"{path}: malformed demographic manifest ({e})") from None
    groups = {}
    for g in genders:
        for b in brackets:
            key = DemographicKey(g, b.label)
            groups[key] = base / template.format(gender=g, bracket=b.label)
    density = base / doc["density"] if doc.get("density") else None
    return DemographicSource(str(doc.get("country", "")), doc.get("year"), density, groups,
                             brackets)


@dataclass
class PopulationJob:
    bbox: geo.BoundingBox
    decimals: int
    out: Path
    density: Path | None = None
    demographics: DemographicSource | None = None
    keep_zeros: bool = False
    seed: int | None = None
    sample_ages: bool = False
    threads: int = 1
    plot_format: str = "svg"

    def __post_init__(self):
        geo.check_decimals(self.decimals)
        if self.density is None and self.demographics is None:
            raise ValueError("population job needs a density grid or a demographic manifest")


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_population_job(path) -> PopulationJob:
    path = Path(path)
    doc = load_toml(path).get("population")
    if doc is None:
        raise ValueError(f"{path}: no [population] table")
    base = path.parent
    demog = None
    if doc.get("demographics"):
        demog = load_demographic_manifest(_resolve(base, doc["demographics"]))
    density = _resolve(base, doc["density"]) if doc.get("density") else None
    if density is None and demog is not None:
        density = demog.density
    return PopulationJob(
        bbox=geo.BoundingBox(*doc["bbox"]),
        decimals=int(doc["decimals"]),
        out=_resolve(base, doc.get("out", "out")),
        density=density,
        demographics=demog,
        keep_zeros=bool(doc.get("keep_zeros", False)),
        seed=doc.get("seed"),
        sample_ages=bool(doc.get("sample_ages", False)),
        threads=int(doc.get("threads", 1)),
        plot_format=doc.get("plot_format", "svg"),
    )


@dataclass
class CropJob:
    climate: Path | str
    crops: list[str]
    out: Path
    mode: str = "location"
    lat: float | None = None
    lon: float | None = None
    months: list[str] = field(default_factory=list)
    bbox: geo.BoundingBox | None = None
    cap: bool = False
    crop_table: Path | None = None
    threads: int = 1
    plot_format: str = "svg"

    def __post_init__(self):
        if self.mode not in ("location", "regional"):
            raise ValueError(f"crop job mode must be location or regional, got {self.mode!r}")
        if self.mode == "location" and (self.lat is None or self.lon is None):
            raise ValueError("location mode needs lat and lon")
        if self.mode == "regional":
            if self.bbox is None:
                raise ValueError("regional mode needs a bbox")
            if len(self.crops) != 1:
                raise ValueError("regional mode takes exactly one crop")
        if not self.crops:
            raise ValueError("crop job needs at least one crop")
        if not self.months:
            raise ValueError("crop job needs at least one month")


def load_crop_job(path) -> CropJob:
    path = Path(path)
    doc = load_toml(path).get("crop")
    if doc is None:
        raise ValueError(f"{path}: no [crop] table")
    base = path.parent
    climate = doc["climate"]
    if not climate.endswith("-fixture"):
        climate = _resolve(base, climate)
    crops = doc.get("crops") or [doc["crop"]]
    months = doc["months"]
    if isinstance(months, str):
        months = [months]
    return CropJob(
        climate=climate,
        crops=list(crops),
        out=_resolve(base, doc.get("out", "out")),
        mode=doc.get("mode", "location"),
        lat=doc.get("lat"),
        lon=doc.get("lon"),
        months=list(months),
        bbox=geo.BoundingBox(*doc["bbox"]) if doc.get("bbox") else None,
        cap=bool(doc.get("cap_100", False)),
        crop_table=_resolve(base, doc["crop_table"]) if doc.get("crop_table") else None,
        threads=int(doc.get("threads", 1)),
        plot_format=doc.get("plot_format", "svg"),
    )
