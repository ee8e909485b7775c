"""Manifest-driven dataset downloads with a checksum-verified local cache.

A manifest names a URL template and a destination-name template. Every
list-valued parameter expands into one file per combination. Files land in
``<cache>/<dataset id>/<bound name>``; interrupted transfers are kept as
``.part`` files and resumed with HTTP Range requests.
"""
from __future__ import annotations

import hashlib
import http.client
import itertools
import logging
import os
import string
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from ._toml import load_toml

log = logging.getLogger(__name__)

MAX_WORKERS = 4
ATTEMPTS = 3
BACKOFF_S = 1.0
CHUNK = 1 << 16

DOWNLOADED, CACHED, RESUMED, FAILED = "downloaded", "cached", "resumed", "failed"


class FetchError(Exception):
    """Precondition failure before any transfer (bad manifest, missing token)."""


class MissingTokenError(FetchError):
    """The manifest names an auth token variable that is not set."""


class ManifestError(FetchError, ValueError):
    pass


class _Formatter(string.Formatter):
    """``{name!l}`` lower-cases and ``{name!u}`` upper-cases a bound value."""

    def convert_field(self, value, conversion):
        if conversion == "l":
            return str(value).lower()
        if conversion == "u":
            return str(value).upper()
        return super().convert_field(value, conversion)


_fmt = _Formatter()


def placeholders(template: str) -> list[str]:
    names = []
    for _, name, _, _ in _fmt.parse(template):
        if name is not None and name not in names:
            if not name.isidentifier():
                raise ManifestError(f"bad placeholder {{{name}}} in {template!r}")
            names.append(name)
    return names


@dataclass
class DatasetManifest:
    id: str
    url: str
    dest: str
    checksums: dict[str, str] = field(default_factory=dict)
    auth_env: str | None = None
    axes: dict[str, Any] = field(default_factory=dict)
    brackets: list[dict] = field(default_factory=list)
    variables: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id or "/" in self.id or self.id.startswith("."):
            raise ManifestError(f"bad dataset id {self.id!r}")
        missing = set(placeholders(self.dest)) - set(placeholders(self.url))
        if missing:
            raise ManifestError(f"dest uses placeholders absent from url: {sorted(missing)}")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = load_toml(path)
        try:
            return cls(
                id=doc["id"], url=doc["url"], dest=doc["dest"],
                checksums={k: v.lower() for k, v in doc.get("checksums", {}).items()},
                auth_env=doc.get("auth_env") or None,
                axes=dict(doc.get("axes", {})),
                brackets=list(doc.get("brackets", [])),
                variables=dict(doc.get("variables", {})),
            )
        except KeyError as e:
            raise ManifestError(f"{path}: manifest is missing key {e}") from None

    def bind(self, bindings: Mapping[str, Any]) -> list[tuple[str, str]]:
        """(url, dest name) for every combination of list-valued parameters."""
        params = {**self.axes, **bindings}
        names = placeholders(self.url)
        unbound = [n for n in names if n not in params]
        if unbound:
            raise ManifestError(f"unbound placeholders: {', '.join(unbound)}")
        choices = [params[n] if isinstance(params[n], (list, tuple)) else [params[n]]
                   for n in names]
        out = []
        for combo in itertools.product(*choices):
            b = dict(zip(names, combo))
            out.append((_fmt.format(self.url, **b), _fmt.format(self.dest, **b)))
        dests = [d for _, d in out]
        if len(set(dests)) != len(dests):
            raise ManifestError("destination names are not unique per binding")
        for d in dests:
            if "/" in d or "\\" in d or d.startswith("."):
                raise ManifestError(f"bad destination name {d!r}")
        return out


@dataclass
class FetchEntry:
    name: str
    url: str
    path: Path
    status: str = FAILED
    bytes: int = 0
    checksum: str = "unchecked"  # ok | mismatch | unchecked
    elapsed_s: float = 0.0
    error: str | None = None
    requests: int = 0


@dataclass
class FetchReport:
    dataset: str
    entries: list[FetchEntry]

    @property
    def ok(self) -> bool:
        return all(e.status != FAILED for e in self.entries)

    @property
    def requests(self) -> int:
        return sum(e.requests for e in self.entries)

    def lines(self) -> list[str]:
        return [f"{e.status:10s} {e.bytes:>12d} {e.checksum:9s} {e.elapsed_s:7.3f}s {e.path}"
                + (f"  ({e.error})" if e.error else "")
                for e in self.entries]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(CHUNK), b""):
            h.update(block)
    return h.hexdigest()


def quarantine(path: Path) -> Path:
    bad = path.with_name(path.name + ".bad")
    path.replace(bad)
    return bad


class _Truncated(Exception):
    pass


def _transfer(url: str, part: Path, token: str | None, timeout: float) -> tuple[int, bool]:
    """One GET into ``part``, resuming from its current size. Returns (bytes, resumed)."""
    offset = part.stat().st_size if part.exists() else 0
    req = urllib.request.Request(url)
    if offset:
        req.add_header("Range", f"bytes={offset}-")
    if token:
        req.add_header("Authorization", f"Bearer {token}")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        resumed = bool(offset) and resp.status == 206
        mode = "ab" if resumed else "wb"
        length = resp.headers.get("Content-Length")
        written = 0
        with open(part, mode) as f:
            try:
                while True:
                    block = resp.read(CHUNK)
                    if not block:
                        break
                    f.write(block)
                    written += len(block)
            except http.client.IncompleteRead as e:
                f.write(e.partial)
                raise _Truncated(f"connection closed after {written + len(e.partial)} bytes")
        if length is not None and written != int(length):
            raise _Truncated(f"got {written} of {length} bytes")
    return part.stat().st_size, resumed


def _fetch_one(entry: FetchEntry, expected: str | None, token: str | None, offline: bool,
               attempts: int, backoff: float, timeout: float) -> FetchEntry:
    t0 = time.monotonic()
    dest = entry.path
    if dest.exists():
        if expected is None:
            entry.status, entry.bytes = CACHED, dest.stat().st_size
            entry.elapsed_s = time.monotonic() - t0
            return entry
        if sha256_file(dest) == expected:
            entry.status, entry.checksum, entry.bytes = CACHED, "ok", dest.stat().st_size
            entry.elapsed_s = time.monotonic() - t0
            return entry
        bad = quarantine(dest)
        log.warning("cached %s failed its checksum; moved to %s and re-fetching", dest.name, bad)

    if offline:
        entry.error = "not cached and offline mode is on"
        entry.elapsed_s = time.monotonic() - t0
        return entry

    dest.parent.mkdir(parents=True, exist_ok=True)
    part = dest.with_name(dest.name + ".part")
    resumed_any = False
    done = False
    for attempt in range(attempts):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
        entry.requests += 1
        try:
            size, resumed = _transfer(entry.url, part, token, timeout)
            resumed_any = resumed_any or resumed
            done = True
            break
        except urllib.error.HTTPError as e:
            entry.error = f"HTTP {e.code}"
            if e.code == 416 and part.exists():
                part.unlink()
            elif 400 <= e.code < 500 and e.code not in (408, 429):
                break
        except (_Truncated, urllib.error.URLError, OSError, http.client.HTTPException) as e:
            entry.error = str(e) or type(e).__name__
        log.info("attempt %d for %s failed: %s", attempt + 1, dest.name, entry.error)
    if not done:
        entry.elapsed_s = time.monotonic() - t0
        return entry

    entry.error = None
    part.replace(dest)
    entry.bytes = size
    if expected is not None:
        if sha256_file(dest) != expected:
            bad = quarantine(dest)
            entry.checksum = "mismatch"
            entry.error = f"checksum mismatch; quarantined as {bad.name}"
            entry.elapsed_s = time.monotonic() - t0
            return entry
        entry.checksum = "ok"
    entry.status = RESUMED if resumed_any else DOWNLOADED
    entry.elapsed_s = time.monotonic() - t0
    return entry


def fetch(manifest: DatasetManifest, bindings: Mapping[str, Any], cache_dir, *,
          offline: bool = False, attempts: int = ATTEMPTS, backoff: float = BACKOFF_S,
          timeout: float = 60.0, workers: int = MAX_WORKERS) -> FetchReport:
    """Make every file the manifest binds to present and verified in the cache."""
    pairs = manifest.bind(bindings)
    token = None
    if manifest.auth_env and not offline:
        token = os.environ.get(manifest.auth_env)
        if not token:
            raise MissingTokenError(f"manifest {manifest.id} needs an auth token in "
                             f"${manifest.auth_env}, which is not set")
    if not manifest.checksums:
        log.warning("manifest %s lists no checksums; downloads cannot be verified", manifest.id)

    root = Path(cache_dir) / manifest.id
    entries = [FetchEntry(name, url, root / name) for url, name in pairs]

    def run(e):
        return _fetch_one(e, manifest.checksums.get(e.name), token, offline,
                          attempts, backoff, timeout)

    with ThreadPoolExecutor(max_workers=max(1, min(workers, MAX_WORKERS))) as pool:
        entries = list(pool.map(run, entries))
    return FetchReport(manifest.id, entries)


def default_cache_dir() -> Path:
    return Path(os.environ.get("SIMSEED_CACHE") or "cache")


# -- offline fixtures --------------------------------------------------------

def _fixture_root() -> Path:
    return Path(str(resources.files("simseed").joinpath("data/fixtures")))


FIXTURES = {"pop-fixture": "pop", "climate-fixture": "climate"}


def offline_fixture(fixture_id: str) -> dict[str, Path]:
    """Paths of a repo-shipped synthetic dataset, keyed by binding name.

    ``pop-fixture``: ``density``, one ``<gender>_<bracket>`` key per demographic
    grid and ``manifest`` (the demographic manifest).
    ``climate-fixture``: ``<variable>_<YYYY-MM>`` per monthly grid, ``elevation``
    and ``config`` (the climate configuration).
    """
    if fixture_id not in FIXTURES:
        raise ManifestError(f"unknown fixture {fixture_id!r}; available: {', '.join(sorted(FIXTURES))}")
    root = _fixture_root() / FIXTURES[fixture_id]
    out: dict[str, Path] = {}
    if fixture_id == "pop-fixture":
        out["manifest"] = root / "demographics.toml"
        out["density"] = root / "density.asc.gz"
        for p in sorted((root / "groups").glob("*.asc.gz")):
            out[p.name[: -len(".asc.gz")]] = p
    else:
        out["config"] = root / "climate.toml"
        out["elevation"] = root / "elevation.csv"
        for p in sorted(root.glob("*.asc.gz")):
            out[p.name[: -len(".asc.gz")]] = p
    missing = [str(p) for p in out.values() if not p.is_file()]
    if missing:
        raise FetchError(f"fixture {fixture_id} is incomplete: {missing[0]}")
    return out
