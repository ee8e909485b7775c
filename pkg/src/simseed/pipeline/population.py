"""Synthetic population pipeline: density conversion, demographic store, agent roster."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .. import geo, popsynth
from ..popsynth import DemographicStore, PopulationTable
from ..raster_io import load_grid
from .jobs import DemographicSource, Outputs, PopulationJob, RunLog, stage
from .plots import PlotSpec, emit_heatmap, emit_pyramid

TOTAL_FILE = "total.csv"
DENSITY_META = "density.json"
LOG_FILE = "run_log.txt"


@dataclass
class RunResult:
    store: Path | None = None
    artifacts: list[Path] = field(default_factory=list)


def _table_heatmap(table: PopulationTable, decimals: int, spec: PlotSpec) -> Path:
    rows = [(r.lat, r.lon, float(r.count)) for r in table.rows]
    if not rows:
        raise ValueError("nothing to plot: the population table is empty")
    return emit_heatmap(rows, spec, cellsize=10.0 ** -decimals, value_label="people")


def run_density(grid: Path, bbox: geo.BoundingBox, decimals: int, out: Path, *,
                keep_zeros: bool = False, plot_format: str = "svg",
                log: RunLog | None = None) -> RunResult:
    """Density grid -> integer population table ``total.csv`` plus a heatmap."""
    log = log or RunLog()
    outputs = Outputs(out)
    with outputs.guard():
        with stage("read"):
            r = load_grid(grid)
        table = popsynth.population_steps(r, bbox, decimals, keep_zeros,
                                          _prefixed(log, "density/"), guard=stage)
        with stage("write"):
            p_total = outputs.file(TOTAL_FILE)
            p_total.write_text(table.to_csv(), encoding="utf-8", newline="\n")
            p_meta = outputs.file(DENSITY_META)
            p_meta.write_text(json.dumps({"decimals": decimals, "bbox": bbox.as_list(),
                                          "keep_zeros": keep_zeros}, indent=2) + "\n",
                              encoding="utf-8", newline="\n")
        with stage("plot"):
            p_map = _table_heatmap(table, decimals, PlotSpec(
                "Population density", outputs.file(f"density_heatmap.{plot_format}")))
        p_log = log.write(outputs.file(LOG_FILE), "density/")
    return RunResult(None, [p_total, p_meta, p_map, p_log])


def _prefixed(log: RunLog, prefix: str):
    def step(name, *rest):
        log.step(prefix + name, *rest)
    return step


def _linked_total(out: Path, decimals: int, bbox: geo.BoundingBox) -> PopulationTable | None:
    meta = out / DENSITY_META
    if not (meta.is_file() and (out / TOTAL_FILE).is_file()):
        return None
    doc = json.loads(meta.read_text(encoding="utf-8"))
    if doc.get("decimals") != decimals or doc.get("bbox") != bbox.as_list():
        return None
    return PopulationTable.from_csv((out / TOTAL_FILE).read_text(encoding="utf-8"))


def run_demographics(source: DemographicSource, bbox: geo.BoundingBox, decimals: int,
                     out: Path, *, keep_zeros: bool = False, threads: int = 1,
                     plot_format: str = "svg", log: RunLog | None = None) -> RunResult:
    """Demographic grids -> population store (manifest + one table per group)."""
    log = log or RunLog()
    out = Path(out)
    outputs = Outputs(out)
    with outputs.guard():
        with stage("read"):
            rasters = {k: load_grid(p) for k, p in source.groups.items()}
        with stage("demographics"):
            store = popsynth.build_demographics(
                rasters, bbox, decimals, country=source.country, year=source.year,
                brackets=source.brackets, keep_zeros=keep_zeros, threads=threads,
                step=_prefixed(log, "demog/"), guard=stage)
        artifacts = []
        with stage("consistency"):
            total = _linked_total(out, decimals, bbox)
            if total is not None:
                store.total = total
                store.manifest.total = TOTAL_FILE
                report = popsynth.consistency_report(store, total)
                p = outputs.file("consistency.json")
                p.write_text(report.to_json(), encoding="utf-8", newline="\n")
                artifacts.append(p)
        with stage("write"):
            for k in store.manifest.groups:
                outputs.file(popsynth.group_file(k))
            outputs.file("manifest.json")
            artifacts = store.write(out) + artifacts
        with stage("plot"):
            pyr = popsynth.pyramid(store)
            artifacts.append(emit_pyramid(pyr, PlotSpec(
                "Population by age bracket and gender", outputs.file(f"pyramid.{plot_format}"))))
            merged: dict[tuple[float, float], int] = {}
            for t in store.tables.values():
                for row in t.rows:
                    merged[(row.lat, row.lon)] = merged.get((row.lat, row.lon), 0) + row.count
            if merged:
                rows = [(lat, lon, float(n)) for (lat, lon), n in
                        sorted(merged.items(), key=lambda kv: (-kv[0][0], kv[0][1]))]
                artifacts.append(emit_heatmap(
                    rows, PlotSpec("Demographic population (all groups)",
                                   outputs.file(f"demog_heatmap.{plot_format}")),
                    cellsize=10.0 ** -decimals, value_label="people"))
        artifacts.append(log.write(outputs.file(LOG_FILE), "demog/"))
    return RunResult(out, artifacts)


def run_agents(store_dir: Path, seed: int, out_csv: Path, *, sample_ages: bool = False,
               threads: int = 1, log: RunLog | None = None) -> RunResult:
    """Population store -> agent roster CSV."""
    log = log or RunLog()
    out_csv = Path(out_csv)
    outputs = Outputs(out_csv.parent)
    with outputs.guard():
        with stage("read"):
            store = DemographicStore.read(store_dir)
        with stage("agents"):
            agents = popsynth.spawn_agents(store, seed, sample_ages, threads)
            n_rows = sum(len(t) for t in store.tables.values())
            mass = sum(t.total() for t in store.tables.values())
            log.step("agents/spawn", (len(store.tables), n_rows),
                     (len(agents), len(popsynth.ROSTER_COLUMNS)), mass, len(agents))
        with stage("write"):
            p = outputs.file(out_csv.name)
            p.write_text(popsynth.roster_csv(agents), encoding="utf-8", newline="\n")
        p_log = log.write(outputs.file(LOG_FILE), "agents/")
    return RunResult(Path(store_dir), [p, p_log])


def run_population(job: PopulationJob, log: RunLog | None = None) -> RunResult:
    """Whole pipeline: density table, demographic store and, given a seed, the roster."""
    log = log or RunLog()
    result = RunResult()
    if job.density is not None:
        result.artifacts += run_density(job.density, job.bbox, job.decimals, job.out,
                                        keep_zeros=job.keep_zeros, plot_format=job.plot_format,
                                        log=log).artifacts
    if job.demographics is not None:
        r = run_demographics(job.demographics, job.bbox, job.decimals, job.out,
                             keep_zeros=job.keep_zeros, threads=job.threads,
                             plot_format=job.plot_format, log=log)
        result.store = r.store
        result.artifacts += r.artifacts
        if job.seed is not None:
            result.artifacts += run_agents(r.store, job.seed, Path(job.out) / "roster.csv",
                                           sample_ages=job.sample_ages, threads=job.threads,
                                           log=log).artifacts
    return result
