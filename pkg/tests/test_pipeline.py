import io
import json
import re

import numpy as np
import pytest

from simseed import evapo, geo, popsynth
from simseed.evapo import ClimateRecord, SiteRecord, YearMonth
from simseed.geo import BoundingBox
from simseed.pipeline import crop as cropmod
from simseed.pipeline import population
from simseed.pipeline.jobs import (CropJob, PipelineError, PopulationJob, RunLog,
                                   load_crop_job, load_demographic_manifest,
                                   load_population_job)
from simseed.raster_io import read_table_csv, save_grid

from conftest import grid

STEP = re.compile(r"^STEP (\S+): in=(\d+)×(\d+) out=(\d+)×(\d+) mass_in=(\S+) mass_out=(\S+)$")


def quiet():
    return RunLog(io.StringIO())


# -- population --------------------------------------------------------------

def write_single_group(tmp_path, values, xll=19.5, yll=41.0, cellsize=0.01):
    src = tmp_path / "src"
    (src / "groups").mkdir(parents=True)
    r = grid(values, xll=xll, yll=yll, cellsize=cellsize)
    save_grid(r, src / "density.asc")
    save_grid(r, src / "groups" / "female_all.asc")
    (src / "demographics.toml").write_text(
        'country = "TST"\nyear = 2020\ndensity = "density.asc"\n'
        'groups = "groups/{gender}_{bracket}.asc"\ngenders = ["female"]\n\n'
        '[[brackets]]\nlabel = "all"\nyears = [0, 99]\n')
    return src, r


VALUES_4x4 = [[1.4, 2.3, 0.3, 0.0], [5.5, 0.5, 0.5, 3.0], [0.2, 0.0, 7.1, 2.2],
              [1.0, 1.0, 0.9, 0.1]]
BBOX_4x4 = BoundingBox(41.0, 41.04, 19.5, 19.54)


class TestPopulation:
    def test_density_single_group_equals_direct_computation(self, tmp_path):
        src, r = write_single_group(tmp_path, VALUES_4x4)
        out = tmp_path / "out"
        population.run_density(src / "density.asc", BBOX_4x4, 2, out, log=quiet())
        text = (out / "total.csv").read_text()
        expected = popsynth.make_population_table(popsynth.integerize(r), decimals=2)
        assert popsynth.PopulationTable.from_csv(text) == expected
        assert expected.total() == round(sum(map(sum, VALUES_4x4)))
        assert (out / "density_heatmap.svg").is_file()

    def test_demographics_and_agents(self, tmp_path):
        src, r = write_single_group(tmp_path, VALUES_4x4)
        out = tmp_path / "out"
        dsrc = load_demographic_manifest(src / "demographics.toml")
        population.run_density(src / "density.asc", BBOX_4x4, 2, out, log=quiet())
        res = population.run_demographics(dsrc, BBOX_4x4, 2, out, log=quiet())
        store = popsynth.DemographicStore.read(res.store)
        rep = json.loads((out / "consistency.json").read_text())
        assert rep["max_abs_discrepancy"] == 0
        roster = out / "roster.csv"
        population.run_agents(out, 7, roster, log=quiet())
        _, rows = read_table_csv(roster.read_text())
        assert len(rows) == sum(n for *_, n in popsynth.pyramid(store)) == 26

    def test_rerun_is_byte_identical(self, tmp_path):
        src, _ = write_single_group(tmp_path, VALUES_4x4)
        dsrc = load_demographic_manifest(src / "demographics.toml")
        outs = []
        for name, threads in (("a", 1), ("b", 4)):
            out = tmp_path / name
            job = PopulationJob(BBOX_4x4, 2, out, density=src / "density.asc",
                                demographics=dsrc, seed=3, sample_ages=True, threads=threads)
            population.run_population(job, log=quiet())
            outs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*"))
                         if p.is_file()})
        assert outs[0] == outs[1]
        assert len(outs[0]) >= 8

    def test_empty_intersection_names_subset_and_cleans_up(self, tmp_path):
        src, _ = write_single_group(tmp_path, VALUES_4x4)
        out = tmp_path / "out"
        with pytest.raises(PipelineError) as ei:
            population.run_density(src / "density.asc", BoundingBox(0, 1, 0, 1), 2, out,
                                   log=quiet())
        assert ei.value.stage.endswith("subset")
        assert "empty intersection" in str(ei.value)
        assert not out.exists()

    def test_failure_keeps_preexisting_files(self, tmp_path):
        src, _ = write_single_group(tmp_path, VALUES_4x4)
        out = tmp_path / "out"
        out.mkdir()
        (out / "mine.txt").write_text("keep")
        with pytest.raises(PipelineError):
            population.run_density(src / "density.asc", BoundingBox(0, 1, 0, 1), 2, out,
                                   log=quiet())
        assert [p.name for p in out.iterdir()] == ["mine.txt"]

    def test_log_is_a_mass_ledger(self, tmp_path):
        src, _ = write_single_group(tmp_path, VALUES_4x4, cellsize=0.005)
        out = tmp_path / "out"
        stream = io.StringIO()
        population.run_density(src / "density.asc", BBOX_4x4, 2, out, log=RunLog(stream))
        lines = (out / "run_log.txt").read_text().splitlines()
        assert lines == stream.getvalue().splitlines()
        steps = [STEP.match(ln) for ln in lines]
        assert all(steps)
        names = [m.group(1) for m in steps]
        assert names[0].startswith("density/") and len(names) >= 3
        # each step's input mass is the previous step's output mass
        for prev, cur in zip(steps, steps[1:]):
            assert float(cur.group(6)) == pytest.approx(float(prev.group(7)), abs=1e-6)
        assert float(steps[0].group(6)) == pytest.approx(sum(map(sum, VALUES_4x4)))

    def test_job_file(self, tmp_path):
        src, _ = write_single_group(tmp_path, VALUES_4x4)
        p = tmp_path / "job.toml"
        p.write_text('[population]\nbbox = [41.0, 41.04, 19.5, 19.54]\ndecimals = 2\n'
                     'demographics = "src/demographics.toml"\nout = "o"\nseed = 1\n')
        job = load_population_job(p)
        assert job.density == src / "density.asc" and job.out == tmp_path / "o"
        population.run_population(job, log=quiet())
        assert (tmp_path / "o" / "roster.csv").is_file()

    def test_bad_decimals(self):
        with pytest.raises(geo.GeoError, match=r"\[2, 6\]"):
            PopulationJob(BBOX_4x4, 9, "out", density="x")


# -- crop --------------------------------------------------------------------

NATIVE_UNITS = {"tair": "C", "qair": "kg kg-1", "swnet": "MJ m-2 day-1",
                "lwnet": "MJ m-2 day-1", "wind": "m s-1", "evap": "mm day-1"}


def write_climate(root, fields, months, xll=2.0, yll=13.0, cellsize=0.5, elevation=300.0):
    """Climate dir in evapo-native units; ``fields[var][month]`` is a 2-D list."""
    root.mkdir(parents=True, exist_ok=True)
    toml = ['elevation = "elevation.csv"', ""]
    for v in cropmod.VARIABLES:
        toml += [f"[variables.{v}]", f'path = "{v}_{{month}}.asc"',
                 f'units = "{NATIVE_UNITS[v]}"', ""]
        for m in months:
            save_grid(grid(fields[v][m], xll=xll, yll=yll, cellsize=cellsize),
                      root / f"{v}_{m}.asc")
    (root / "climate.toml").write_text("\n".join(toml))
    shape = np.asarray(fields["tair"][months[0]]).shape
    lines = ["lat,lon,elevation_m"]
    for i in range(shape[0]):
        for j in range(shape[1]):
            lat = yll + (shape[0] - i - 0.5) * cellsize
            lon = xll + (j + 0.5) * cellsize
            lines.append(f"{lat},{lon},{elevation}")
    (root / "elevation.csv").write_text("\n".join(lines) + "\n")
    return root / "climate.toml"


def uniform_fields(months, shape=(2, 2), **over):
    base = dict(tair=25.0, qair=0.012, swnet=15.0, lwnet=4.0, wind=2.0, evap=3.0)
    base.update(over)
    return {v: {m: np.full(shape, base[v]).tolist() for m in months} for v in base}


MONTHS = ["2020-07", "2020-08", "2020-09"]


class TestCropLocation:
    def test_two_crops_three_months(self, tmp_path):
        cfg = write_climate(tmp_path / "c", uniform_fields(MONTHS), MONTHS)
        job = CropJob(cfg, ["millet", "maize"], tmp_path / "o", lat=13.6, lon=2.3,
                      months=MONTHS)
        cropmod.run_crop_location(job, log=quiet())
        _, rows = read_table_csv((tmp_path / "o" / "wrsi_location.csv").read_text())
        monthly = [r for r in rows if ".." not in r["month"]]
        seasonal = [r for r in rows if ".." in r["month"]]
        assert len(monthly) == 6
        assert [(r["month"], r["crop"]) for r in monthly[:2]] == [("2020-07", "millet"),
                                                                   ("2020-07", "maize")]
        assert {r["crop"] for r in seasonal} == {"millet", "maize"}
        for r in monthly:
            assert float(r["wr"]) == pytest.approx(float(r["pet"]) * float(r["kc"]), rel=1e-12)
        assert (tmp_path / "o" / "wrsi_timeseries.svg").is_file()

    def test_values_match_direct_evaluation(self, tmp_path):
        cfg = write_climate(tmp_path / "c", uniform_fields(MONTHS), MONTHS)
        job = CropJob(cfg, ["millet"], tmp_path / "o", lat=13.6, lon=2.3, months=MONTHS)
        cropmod.run_crop_location(job, log=quiet())
        _, rows = read_table_csv((tmp_path / "o" / "wrsi_location.csv").read_text())
        ea = cropmod.derive_vapor_pressure(0.012, 300.0)
        rec = ClimateRecord(YearMonth(2020, 8), 25.0, ea, 15.0, 4.0, 2.0, 3.0)
        pet = evapo.penman_monteith(rec, SiteRecord(13.75, 2.25, 300.0))
        aug = rows[1]
        assert aug["month"] == "2020-08" and float(aug["pet"]) == pet
        assert float(aug["wrsi"]) == evapo.wrsi_monthly(3.0, pet * 1.0)

    def test_aet_equal_wr_gives_100(self, tmp_path):
        months = ["2020-08"]
        ea = cropmod.derive_vapor_pressure(0.012, 300.0)
        rec = ClimateRecord(YearMonth(2020, 8), 25.0, ea, 15.0, 4.0, 2.0, 0.0)
        wr = evapo.penman_monteith(rec, SiteRecord(0, 0, 300.0)) * 1.0  # millet mid stage
        cfg = write_climate(tmp_path / "c", uniform_fields(months, evap=wr), months)
        job = CropJob(cfg, ["millet"], tmp_path / "o", lat=13.6, lon=2.3, months=months)
        cropmod.run_crop_location(job, log=quiet())
        _, rows = read_table_csv((tmp_path / "o" / "wrsi_location.csv").read_text())
        assert rows[0]["wrsi"] == "100"

    def test_tie_goes_north_west(self, tmp_path):
        f = uniform_fields(["2020-08"])
        f["evap"]["2020-08"] = [[1.0, 2.0], [3.0, 4.0]]
        cfg = write_climate(tmp_path / "c", f, ["2020-08"])
        # (13.5, 2.5) is the shared corner of all four cells
        job = CropJob(cfg, ["millet"], tmp_path / "o", lat=13.5, lon=2.5, months=["2020-08"])
        cropmod.run_crop_location(job, log=quiet())
        _, rows = read_table_csv((tmp_path / "o" / "wrsi_location.csv").read_text())
        assert float(rows[0]["aet"]) == 1.0

    @pytest.mark.parametrize("lat,lon,cell", [(13.9, 2.1, (0, 0)), (13.1, 2.9, (1, 1)),
                                              (14.0, 3.0, (0, 1)), (13.0, 2.0, (1, 0))])
    def test_nearest_cell(self, lat, lon, cell):
        h = grid([[0, 0], [0, 0]], xll=2, yll=13, cellsize=0.5).header
        assert cropmod.nearest_cell(h, lat, lon) == cell

    def test_outside_extent(self, tmp_path):
        cfg = write_climate(tmp_path / "c", uniform_fields(MONTHS), MONTHS)
        job = CropJob(cfg, ["millet"], tmp_path / "o", lat=20.0, lon=2.3, months=MONTHS)
        with pytest.raises(PipelineError, match="outside the climate grid"):
            cropmod.run_crop_location(job, log=quiet())
        assert not (tmp_path / "o").exists()

    def test_nodata_month_blanks_row_and_season(self, tmp_path):
        f = uniform_fields(MONTHS)
        f["evap"]["2020-08"] = [[-9999, 3.0], [3.0, 3.0]]
        cfg = write_climate(tmp_path / "c", f, MONTHS)
        job = CropJob(cfg, ["millet"], tmp_path / "o", lat=13.75, lon=2.25, months=MONTHS)
        cropmod.run_crop_location(job, log=quiet())
        _, rows = read_table_csv((tmp_path / "o" / "wrsi_location.csv").read_text())
        assert rows[1]["wrsi"] == "" and rows[0]["wrsi"] != ""
        assert rows[-1]["month"].count("..") == 1 and rows[-1]["wrsi"] == ""

    def test_unknown_crop(self, tmp_path):
        cfg = write_climate(tmp_path / "c", uniform_fields(MONTHS), MONTHS)
        job = CropJob(cfg, ["teff"], tmp_path / "o", lat=13.6, lon=2.3, months=MONTHS)
        with pytest.raises(PipelineError, match="unknown crop"):
            cropmod.run_crop_location(job, log=quiet())

    def test_missing_month(self, tmp_path):
        cfg = write_climate(tmp_path / "c", uniform_fields(MONTHS), MONTHS)
        job = CropJob(cfg, ["millet"], tmp_path / "o", lat=13.6, lon=2.3,
                      months=["2020-10"])
        with pytest.raises(PipelineError, match="missing climate grids"):
            cropmod.run_crop_location(job, log=quiet())

    def test_vapor_pressure_from_specific_humidity(self):
        assert cropmod.derive_vapor_pressure(0.010, 0.0) == pytest.approx(1.61877976285596,
                                                                          rel=1e-12)
        with pytest.raises(evapo.ClimateError):
            cropmod.derive_vapor_pressure(0.2, 0.0)

    @pytest.mark.parametrize("name,units,raw,expected", [
        ("tair", "K", 300.0, 26.85), ("swnet", "W m-2", 100.0, 8.64),
        ("evap", "kg m-2 s-1", 1e-5, 0.864), ("lwnet", "W m-2", 50.0, 4.32)])
    def test_unit_conversion(self, name, units, raw, expected):
        assert cropmod.VariableSpec(name, "x", units).convert(raw) == pytest.approx(expected)

    def test_downward_longwave_sign(self):
        assert cropmod.VariableSpec("lwnet", "x", "W m-2", "down").convert(-50.0) == \
            pytest.approx(4.32)

    def test_bad_units(self):
        with pytest.raises(evapo.ClimateError, match="units"):
            cropmod.VariableSpec("tair", "x", "F")


class TestCropRegional:
    def test_dormant_month(self, tmp_path, caplog):
        months = ["2020-08", "2020-11"]
        cfg = write_climate(tmp_path / "c", uniform_fields(months), months)
        table = tmp_path / "crops.csv"
        table.write_text(",".join(evapo.CROP_COLUMNS) + "\nshort,0.3,1.0,0.4,8,1,0,1,0\n")
        job = CropJob(cfg, ["short"], tmp_path / "o", mode="regional",
                      bbox=BoundingBox(13, 14, 2, 3), months=months, crop_table=table)
        res = cropmod.run_crop_regional(job, log=quiet())
        nov = (tmp_path / "o" / "wrsi_short_2020-11.csv").read_text()
        assert nov == "lat,lon,wrsi\n"
        assert any("dormant" in w for w in res.warnings)
        assert "dormant" in caplog.text
        assert "dormant" in (tmp_path / "o" / "wrsi_short_2020-11.svg").read_text()
        _, aug = read_table_csv((tmp_path / "o" / "wrsi_short_2020-08.csv").read_text())
        assert len(aug) == 4

    def test_bbox_selects_cells(self, tmp_path):
        f = uniform_fields(["2020-08"], shape=(4, 4))
        cfg = write_climate(tmp_path / "c", f, ["2020-08"], cellsize=0.25)
        job = CropJob(cfg, ["millet"], tmp_path / "o", mode="regional",
                      bbox=BoundingBox(13.5, 14.0, 2.0, 2.5), months=["2020-08"])
        cropmod.run_crop_regional(job, log=quiet())
        _, rows = read_table_csv((tmp_path / "o" / "wrsi_millet_2020-08.csv").read_text())
        assert [(float(r["lat"]), float(r["lon"])) for r in rows] == [
            (13.875, 2.125), (13.875, 2.375), (13.625, 2.125), (13.625, 2.375)]

    def test_bbox_outside(self, tmp_path):
        cfg = write_climate(tmp_path / "c", uniform_fields(MONTHS), MONTHS)
        job = CropJob(cfg, ["millet"], tmp_path / "o", mode="regional",
                      bbox=BoundingBox(20, 21, 2, 3), months=MONTHS)
        with pytest.raises(PipelineError, match="empty intersection"):
            cropmod.run_crop_regional(job, log=quiet())

    def test_regional_equals_location(self, tmp_path):
        rng = np.random.default_rng(8)
        f = uniform_fields(MONTHS, shape=(3, 3))
        for v, lo, hi in (("tair", 15, 35), ("evap", 0, 6), ("swnet", 8, 22)):
            for m in MONTHS:
                f[v][m] = rng.uniform(lo, hi, (3, 3)).tolist()
        cfg = write_climate(tmp_path / "c", f, MONTHS, cellsize=0.25)
        job = CropJob(cfg, ["sorghum"], tmp_path / "r", mode="regional",
                      bbox=BoundingBox(13, 13.75, 2, 2.75), months=MONTHS, threads=3)
        cropmod.run_crop_regional(job, log=quiet())
        for m in MONTHS:
            _, rows = read_table_csv((tmp_path / "r" / f"wrsi_sorghum_{m}.csv").read_text())
            assert len(rows) == 9
            for r in rows[::4]:
                out = tmp_path / f"loc_{r['lat']}_{r['lon']}"
                loc = CropJob(cfg, ["sorghum"], out, lat=float(r["lat"]), lon=float(r["lon"]),
                              months=[m])
                cropmod.run_crop_location(loc, log=quiet())
                _, lr = read_table_csv((out / "wrsi_location.csv").read_text())
                assert lr[0]["wrsi"] == r["wrsi"]

    def test_job_file(self, tmp_path):
        cfg = write_climate(tmp_path / "c", uniform_fields(MONTHS), MONTHS)
        p = tmp_path / "job.toml"
        p.write_text(f'[crop]\nmode = "regional"\nclimate = "{cfg}"\ncrop = "millet"\n'
                     'months = ["2020-08"]\nbbox = [13, 14, 2, 3]\nout = "o"\n')
        job = load_crop_job(p)
        assert job.out == tmp_path / "o" and job.crops == ["millet"]
        res = cropmod.run_crop(job, log=quiet())
        assert (tmp_path / "o" / "wrsi_millet_2020-08.csv") in res.artifacts

    @pytest.mark.parametrize("kw", [dict(mode="regional", crops=["a", "b"]),
                                    dict(mode="location", lat=None), dict(months=[]),
                                    dict(mode="other")])
    def test_job_validation(self, kw):
        base = dict(climate="x", crops=["millet"], out="o", mode="location", lat=1.0,
                    lon=1.0, months=["2020-01"], bbox=BoundingBox(0, 1, 0, 1))
        base.update(kw)
        with pytest.raises(ValueError):
            CropJob(**base)


def test_fixture_location_run(tmp_path, climate_fixture):
    job = CropJob("climate-fixture", ["millet", "sorghum"], tmp_path, lat=13.52, lon=2.47,
                  months=MONTHS)
    cropmod.run_crop_location(job, log=quiet())
    _, rows = read_table_csv((tmp_path / "wrsi_location.csv").read_text())
    assert len(rows) == 6 + 2
    assert all(r["wrsi"] != "" for r in rows)
