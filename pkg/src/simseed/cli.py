"""``simseed`` command line: fetch inputs, build populations, compute crop WRSI.

Exit codes: 0 success, 1 usage error, 2 input/validation error, 3 network
error, 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from . import __version__, fetch as fetch_mod, geo
from .evapo import ClimateError, YearMonth, month_range
from .pipeline import crop as crop_pipe
from .pipeline import jobs, population
from .pipeline.jobs import CropJob, PipelineError, RunLog
from .pipeline.plots import PlotError
from .popsynth import StoreError
from .raster_io import GridFormatError

log = logging.getLogger("simseed")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NETWORK, EXIT_INTERNAL = 0, 1, 2, 3, 4
PLOT_FORMATS = ("svg", "png")


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class ValidationError(Exception):
    pass


class _Exit(Exception):
    def __init__(self, code: int):
        self.code = code


class Parser(argparse.ArgumentParser):
    """Raises instead of exiting so ``main`` owns every exit code."""

    def error(self, message):
        raise UsageError(message, self.format_usage())

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise _Exit(status)


class Once(argparse.Action):
    """Store a scalar flag, rejecting a second occurrence instead of last-wins."""

    def __call__(self, parser, namespace, values, option_string=None):
        seen = namespace.__dict__.setdefault("_seen", set())
        if self.dest in seen:
            parser.error(f"{option_string} given more than once")
        seen.add(self.dest)
        setattr(namespace, self.dest, values)


class OnceFlag(Once):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, default=False, **kw)

    def __call__(self, parser, namespace, values, option_string=None):
        super().__call__(parser, namespace, True, option_string)


def source_digest() -> str:
    """SHA-256 over the package's Python sources, in path order."""
    h = hashlib.sha256()
    root = resources.files("simseed")
    for p in sorted(Path(str(root)).rglob("*.py")):
        h.update(p.relative_to(Path(str(root))).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _validated(flag: str, fn: Callable, value):
    try:
        return fn(value)
    except (ValueError, TypeError, ClimateError, geo.GeoError) as e:
        raise ValidationError(f"{flag}: {e}") from None


def _int_at_least(lo: int) -> Callable[[str], int]:
    def conv(s):
        try:
            v = int(s)
        except ValueError:
            raise ValueError(f"expected an integer, got {s!r}") from None
        if v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        return v
    return conv


def _decimals(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise ValueError(f"expected an integer in [{geo.MIN_DECIMALS}, {geo.MAX_DECIMALS}], "
                         f"got {s!r}") from None
    geo.check_decimals(v)
    return v


def _float(s: str) -> float:
    return float(s)


def parse_months(text: str) -> list[str]:
    """``YYYY-MM``, ``YYYY-MM..YYYY-MM`` or a comma list of either."""
    out: list[str] = []
    for item in text.split(","):
        item = item.strip()
        if ".." in item:
            a, b = item.split("..", 1)
            out += [str(m) for m in month_range(YearMonth.parse(a), YearMonth.parse(b))]
        else:
            out.append(str(YearMonth.parse(item)))
    if len(set(out)) != len(out):
        raise ValueError(f"month list {text!r} repeats a month")
    return out


def _names(s: str) -> list[str]:
    names = [n.strip() for n in s.split(",") if n.strip()]
    if not names:
        raise ValueError("expected one or more comma-separated names")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate names in {s!r}")
    return names


def _bindings(pairs: Sequence[str]) -> dict:
    out: dict = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"expected key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        k = k.strip()
        if k in out:
            raise ValueError(f"{k} bound more than once")
        out[k] = [x.strip() for x in v.split(",")] if "," in v else v.strip()
    return out


def _manifest_path(s: str) -> Path:
    """A manifest file, or the id of one of the packaged manifest templates."""
    if Path(s).exists():
        return Path(s)
    packaged = Path(str(resources.files("simseed").joinpath(f"data/manifests/{s}.toml")))
    if "/" not in s and packaged.is_file():
        return packaged
    raise ValueError(f"{s} is neither a manifest file nor a packaged manifest id")


def _existing(s: str) -> Path:
    p = Path(s)
    if not p.exists():
        raise ValueError(f"{s} does not exist")
    return p


# -- commands ----------------------------------------------------------------

def _print_paths(paths) -> None:
    for p in paths:
        print(p)


def cmd_fetch(a) -> int:
    if a.manifest in fetch_mod.FIXTURES:
        for name, p in fetch_mod.offline_fixture(a.manifest).items():
            print(f"{name} {p}")
        return EXIT_OK
    manifest = fetch_mod.DatasetManifest.load(_validated("--manifest", _manifest_path, a.manifest))
    bindings = _validated("--set", _bindings, a.set)
    cache = Path(a.cache) if a.cache else fetch_mod.default_cache_dir()
    report = fetch_mod.fetch(manifest, bindings, cache, offline=a.offline,
                             workers=_validated("--threads", _int_at_least(1), a.threads))
    for line in report.lines():
        print(line)
    if not report.ok:
        failed = [e for e in report.entries if e.status == fetch_mod.FAILED]
        for e in failed:
            log.error("%s: %s", e.name, e.error)
        return EXIT_NETWORK
    return EXIT_OK


def _plot_format(a) -> str:
    if a.plot_format not in PLOT_FORMATS:
        raise ValidationError(f"--plot-format: must be one of {', '.join(PLOT_FORMATS)}")
    return a.plot_format


def cmd_pop_density(a) -> int:
    _validated("--threads", _int_at_least(1), a.threads)
    res = population.run_density(
        _validated("--input", _existing, a.input),
        _validated("--bbox", geo.BoundingBox.parse, a.bbox),
        _validated("--decimals", _decimals, a.decimals),
        Path(a.out), keep_zeros=a.keep_zeros, plot_format=_plot_format(a), log=RunLog())
    _print_paths(res.artifacts)
    return EXIT_OK


def _demographic_source(spec: str) -> jobs.DemographicSource:
    if spec in fetch_mod.FIXTURES:
        spec = str(fetch_mod.offline_fixture(spec)["manifest"])
    return jobs.load_demographic_manifest(_validated("--manifest", _existing, spec))


def cmd_pop_demog(a) -> int:
    bbox = _validated("--bbox", geo.BoundingBox.parse, a.bbox)
    decimals = _validated("--decimals", _decimals, a.decimals)
    threads = _validated("--threads", _int_at_least(1), a.threads)
    res = population.run_demographics(
        _demographic_source(a.manifest), bbox, decimals, Path(a.out),
        keep_zeros=a.keep_zeros, threads=threads, plot_format=_plot_format(a), log=RunLog())
    _print_paths(res.artifacts)
    return EXIT_OK


def cmd_pop_agents(a) -> int:
    seed = _validated("--seed", _int_at_least(0), a.seed)
    threads = _validated("--threads", _int_at_least(1), a.threads)
    res = population.run_agents(_validated("--store", _existing, a.store), seed, Path(a.out),
                                sample_ages=a.sample_ages, threads=threads, log=RunLog())
    _print_paths(res.artifacts)
    return EXIT_OK


def cmd_pop_run(a) -> int:
    job = _validated("--job", jobs.load_population_job, _validated("--job", _existing, a.job))
    res = population.run_population(job, RunLog())
    _print_paths(res.artifacts)
    return EXIT_OK


def _crop_common(a) -> dict:
    return dict(
        climate=a.climate,
        out=Path(a.out),
        months=_validated("--months", parse_months, a.months),
        cap=a.cap_100,
        crop_table=_validated("--crop-table", _existing, a.crop_table) if a.crop_table else None,
        threads=_validated("--threads", _int_at_least(1), a.threads),
        plot_format=_plot_format(a),
    )


def _report(res) -> int:
    _print_paths(res.artifacts)
    return EXIT_OK


def cmd_crop_location(a) -> int:
    job = CropJob(crops=_validated("--crops", _names, a.crops), mode="location",
                  lat=_validated("--lat", _float, a.lat), lon=_validated("--lon", _float, a.lon),
                  **_crop_common(a))
    return _report(crop_pipe.run_crop_location(job, RunLog()))


def cmd_crop_regional(a) -> int:
    crops = _validated("--crop", _names, a.crop)
    if len(crops) != 1:
        raise ValidationError("--crop: regional mode takes exactly one crop")
    job = CropJob(crops=crops, mode="regional",
                  bbox=_validated("--bbox", geo.BoundingBox.parse, a.bbox), **_crop_common(a))
    return _report(crop_pipe.run_crop_regional(job, RunLog()))


def cmd_crop_run(a) -> int:
    job = _validated("--job", jobs.load_crop_job, _validated("--job", _existing, a.job))
    return _report(crop_pipe.run_crop(job, RunLog()))


# -- parser ------------------------------------------------------------------

def _opt(p, *names, **kw):
    if kw.pop("flag", False):
        p.add_argument(*names, action=OnceFlag, **kw)
    else:
        p.add_argument(*names, action=Once, **kw)


def build_parser() -> Parser:
    p = Parser(prog="simseed", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="store_true",
                   help="print the version and source digest, then exit")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more diagnostics on stderr (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="{fetch,pop,crop}", parser_class=Parser)

    f = sub.add_parser("fetch", help="download a dataset manifest into the cache")
    _opt(f, "--manifest", required=True, help="manifest TOML or a fixture id "
         f"({', '.join(sorted(fetch_mod.FIXTURES))})")
    f.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="bind a placeholder; a comma list fetches every value")
    _opt(f, "--offline", flag=True, help="use only the cache; never touch the network")
    _opt(f, "--cache", help="cache directory (default: $SIMSEED_CACHE or ./cache)")
    _opt(f, "--threads", default="4", help="concurrent downloads, at most 4")
    f.set_defaults(func=cmd_fetch)

    pop = sub.add_parser("pop", help="synthetic population steps")
    psub = pop.add_subparsers(dest="step", metavar="{density,demog,agents,run}",
                              parser_class=Parser)
    pop.set_defaults(func=None, _sub=pop)

    def plot_flags(q):
        _opt(q, "--plot-format", default="svg", help="svg (default) or png")

    d = psub.add_parser("density", help="density grid to an integer population table")
    _opt(d, "--input", required=True, help="ESRI ASCII density grid (.asc or .asc.gz)")
    _opt(d, "--bbox", required=True, help="lat_min,lat_max,lon_min,lon_max")
    _opt(d, "--decimals", required=True, help="output precision in decimal places, 2..6")
    _opt(d, "--out", required=True, help="output directory")
    _opt(d, "--keep-zeros", flag=True, help="keep cells with zero people")
    _opt(d, "--threads", default="1", help="accepted for symmetry; one grid is one task")
    plot_flags(d)
    d.set_defaults(func=cmd_pop_density)

    g = psub.add_parser("demog", help="demographic grids to a population store")
    _opt(g, "--manifest", required=True, help="demographic manifest TOML or pop-fixture")
    _opt(g, "--bbox", required=True, help="lat_min,lat_max,lon_min,lon_max")
    _opt(g, "--decimals", required=True, help="output precision in decimal places, 2..6")
    _opt(g, "--out", required=True, help="store directory")
    _opt(g, "--keep-zeros", flag=True, help="keep cells with zero people")
    _opt(g, "--threads", default="1", help="worker threads (output is identical)")
    plot_flags(g)
    g.set_defaults(func=cmd_pop_demog)

    ag = psub.add_parser("agents", help="population store to an agent roster")
    _opt(ag, "--store", required=True, help="store directory written by 'pop demog'")
    _opt(ag, "--seed", required=True, help="non-negative integer seed")
    _opt(ag, "--out", required=True, help="roster CSV path")
    _opt(ag, "--sample-ages", flag=True, help="draw an age in years within each bracket")
    _opt(ag, "--threads", default="1", help="worker threads (output is identical)")
    ag.set_defaults(func=cmd_pop_agents)

    r = psub.add_parser("run", help="whole population pipeline from a job file")
    _opt(r, "--job", required=True, help="job TOML with a [population] table")
    r.set_defaults(func=cmd_pop_run)

    crop = sub.add_parser("crop", help="crop water requirement satisfaction (WRSI)")
    csub = crop.add_subparsers(dest="step", metavar="{location,regional,run}",
                               parser_class=Parser)
    crop.set_defaults(func=None, _sub=crop)

    def crop_flags(q):
        _opt(q, "--out", required=True, help="output directory")
        _opt(q, "--climate", default="climate-fixture",
             help="climate configuration TOML or climate-fixture (default)")
        _opt(q, "--crop-table", help="crop definitions CSV (default: packaged table)")
        _opt(q, "--cap-100", flag=True, help="cap WRSI at 100")
        _opt(q, "--threads", default="1", help="worker threads (output is identical)")
        plot_flags(q)

    lo = csub.add_parser("location", help="WRSI time series at one location")
    _opt(lo, "--lat", required=True, help="latitude, degrees")
    _opt(lo, "--lon", required=True, help="longitude, degrees")
    _opt(lo, "--crops", required=True, help="comma-separated crop names")
    _opt(lo, "--months", required=True, help="YYYY-MM..YYYY-MM")
    crop_flags(lo)
    lo.set_defaults(func=cmd_crop_location)

    rg = csub.add_parser("regional", help="per-month WRSI grids over a bounding box")
    _opt(rg, "--bbox", required=True, help="lat_min,lat_max,lon_min,lon_max")
    _opt(rg, "--crop", required=True, help="one crop name")
    _opt(rg, "--months", required=True, help="comma-separated YYYY-MM (ranges allowed)")
    crop_flags(rg)
    rg.set_defaults(func=cmd_crop_regional)

    cr = csub.add_parser("run", help="crop pipeline from a job file")
    _opt(cr, "--job", required=True, help="job TOML with a [crop] table")
    cr.set_defaults(func=cmd_crop_run)
    return p


INPUT_ERRORS = (ValidationError, GridFormatError, geo.GeoError, StoreError, ClimateError,
                PlotError, fetch_mod.ManifestError, FileNotFoundError, IsADirectoryError,
                NotADirectoryError, PermissionError, UnicodeDecodeError)


def exit_code(e: BaseException) -> int:
    """Map an exception raised by a command to its exit status."""
    if isinstance(e, PipelineError):
        return exit_code(e.cause)
    if isinstance(e, UsageError):
        return EXIT_USAGE
    if isinstance(e, fetch_mod.MissingTokenError):
        return EXIT_INPUT
    if isinstance(e, INPUT_ERRORS):
        return EXIT_INPUT
    if isinstance(e, fetch_mod.FetchError):
        return EXIT_NETWORK
    if isinstance(e, AssertionError):
        return EXIT_INTERNAL
    if isinstance(e, (ValueError, KeyError)):
        # malformed inputs surface from parsers as plain ValueError/KeyError
        return EXIT_INPUT
    return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(e.usage)
        print(f"simseed: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _Exit as e:
        return e.code
    if a.version:
        print(f"simseed {__version__} (source {source_digest()})")
        return EXIT_OK
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s: %(message)s",
                        level=logging.DEBUG if a.verbose > 1 else
                        logging.INFO if a.verbose else logging.WARNING)
    func = getattr(a, "func", None)
    if func is None:
        target = getattr(a, "_sub", parser)
        sys.stderr.write(target.format_usage())
        print("simseed: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return func(a)
    except Exception as e:
        code = exit_code(e)
        if code == EXIT_INTERNAL:
            log.error("internal error", exc_info=e)
        else:
            print(f"simseed: error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
