"""Monitoring-site geometry, wind records, and their file formats.

A site bundles everything about the physical scene that is *not* a
calibration parameter: source and receptor coordinates, the collection
jar geometry, deposition/settling speeds, the reference height of the
wind measurements, the accumulation window, and the computational domain.

Wind records are (time, speed, direction) samples; direction uses the
meteorological convention (the direction the wind blows *from*, measured
clockwise from +y), so the flow vector is ``-speed * (sin d, cos d)``.
"""

from __future__ import annotations

import csv
import io
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class SiteConfig:
    """Fixed description of a deposition-monitoring site.

    Attributes
    ----------
    sources : ndarray, shape (n, 3)
        Stack coordinates (x, y, z) in metres.
    receptors : ndarray, shape (d, 2)
        Ground sampler coordinates (x, y) in metres.
    jar_area : float
        Collection area of one sampler [m^2].
    v_set, v_dep : float
        Settling and deposition velocities [m/s].
    z_ref : float
        Height of the wind measurements [m].
    duration : float
        Accumulation window T [s].
    domain : tuple
        ((x0, x1), (y0, y1), z_top); the ground plane is z = 0.
    grid : tuple
        Cells per axis (nx, ny, nz).
    """

    name: str
    sources: np.ndarray
    receptors: np.ndarray
    jar_area: float = 0.0206
    v_set: float = 0.0027
    v_dep: float = 0.005
    z_ref: float = 10.0
    duration: float = 3600.0
    domain: tuple = ((-1000.0, 1000.0), (-1000.0, 1000.0), 150.0)
    grid: tuple = (24, 24, 24)
    synthetic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sources", np.atleast_2d(np.asarray(self.sources, dtype=float)))
        object.__setattr__(self, "receptors", np.atleast_2d(np.asarray(self.receptors, dtype=float)))
        if self.sources.shape[0] < 1 or self.sources.shape[1] != 3:
            raise ContractError("sources must be a nonempty (n, 3) array")
        if self.receptors.shape[0] < 1 or self.receptors.shape[1] != 2:
            raise ContractError("receptors must be a nonempty (d, 2) array")
        for v, label in ((self.jar_area, "jar_area"), (self.z_ref, "z_ref"), (self.duration, "duration")):
            if not v > 0:
                raise ContractError(f"{label} must be positive, got {v}")
        if self.v_set < 0 or self.v_dep < 0:
            raise ContractError("settling/deposition velocities must be >= 0")
        (x0, x1), (y0, y1), z_top = self.domain
        if not (x0 < x1 and y0 < y1 and z_top > 0):
            raise ContractError(f"degenerate domain {self.domain}")
        nx, ny, nz = self.grid
        if min(nx, ny, nz) < 2:
            raise ContractError(f"grid {self.grid} needs at least 2 cells per axis")
        sx, sy, sz = self.sources.T
        if not (np.all(sx > x0) and np.all(sx < x1) and np.all(sy > y0) and np.all(sy < y1)):
            raise ContractError("all sources must lie strictly inside the domain")
        if not (np.all(sz > 0) and np.all(sz < z_top)):
            raise ContractError("all source heights must lie strictly inside (0, z_top)")
        rx, ry = self.receptors.T
        if not (np.all(rx > x0) and np.all(rx < x1) and np.all(ry > y0) and np.all(ry < y1)):
            raise ContractError("all receptors must lie strictly inside the domain")

    @property
    def n_sources(self) -> int:
        return self.sources.shape[0]

    @property
    def n_receptors(self) -> int:
        return self.receptors.shape[0]


@dataclass(frozen=True)
class WindRecord:
    """Piecewise-constant wind samples over the accumulation window.

    ``times`` must be ascending and start within [0, duration); sample i
    is taken to hold from times[i] until times[i+1] (the last one until
    the end of the window).
    """

    times: np.ndarray
    speeds: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        for name in ("times", "speeds", "directions"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if not len(self.times) == len(self.speeds) == len(self.directions):
            raise ContractError("wind record columns must have equal length")
        if len(self.times) == 0:
            raise ContractError("wind record is empty")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("wind record times must be strictly ascending")
        if self.times[0] < 0:
            raise ContractError("wind record must not start before t = 0")
        if np.any(self.speeds < 0) or not np.all(np.isfinite(self.speeds)):
            raise ContractError("wind speeds must be finite and >= 0")
        if not np.all(np.isfinite(self.directions)):
            raise ContractError("wind directions must be finite")


@dataclass(frozen=True)
class WindBin:
    """One (speed, direction, duration) summary of part of the record."""

    speed: float
    direction: float
    duration: float


def flow_vector(speed: float, direction: float) -> tuple[float, float]:
    """Horizontal flow (u, v) for a meteorological from-direction."""
    return -speed * math.sin(direction), -speed * math.cos(direction)


def bin_wind(record: WindRecord, duration: float, n_bins: int = 16) -> list[WindBin]:
    """Compress a wind record into at most ``n_bins`` representative bins.

    Samples are grouped on a (direction sector) x (speed class) grid —
    sectors uniform over the circle, speed split at the duration-weighted
    median when the bin budget allows two classes. Each nonempty group
    becomes one bin carrying its total duration, duration-weighted mean
    speed, and duration-weighted circular mean direction, so the
    cumulative structure sum(duration_b) = T is preserved exactly.

    Bins are returned in record order of first occurrence, so a record
    that is already piecewise constant with few distinct regimes passes
    through essentially unchanged.
    """
    if n_bins < 1:
        raise ContractError(f"n_bins must be >= 1, got {n_bins}")
    if duration <= 0:
        raise ContractError(f"duration must be positive, got {duration}")
    t = record.times
    if t[0] >= duration:
        raise ContractError("wind record starts after the accumulation window ends")
    edges = np.append(t, duration)
    if edges[-2] >= duration:
        raise ContractError("wind record extends past the accumulation window")
    seg_dur = np.diff(np.clip(edges, 0.0, duration))
    keep = seg_dur > 0
    spd, dirn, seg_dur = record.speeds[keep], record.directions[keep], seg_dur[keep]

    n_speed = 2 if (n_bins % 2 == 0 and n_bins >= 8) else 1
    n_dir = n_bins // n_speed

    two_pi = 2.0 * math.pi
    wrapped = np.mod(dirn, two_pi)
    sector = np.minimum((wrapped / (two_pi / n_dir)).astype(int), n_dir - 1)
    if n_speed == 2:
        order = np.argsort(spd, kind="stable")
        cum = np.cumsum(seg_dur[order])
        split = spd[order][np.searchsorted(cum, 0.5 * cum[-1])]
        speed_class = (spd > split).astype(int)
    else:
        speed_class = np.zeros(len(spd), dtype=int)
    group = sector * n_speed + speed_class

    bins = []
    seen = {}
    for g in group:
        if g not in seen:
            seen[g] = True
            mask = group == g
            w = seg_dur[mask]
            total = float(w.sum())
            mean_speed = float(np.sum(w * spd[mask]) / total)
            mean_dir = float(
                math.atan2(np.sum(w * np.sin(dirn[mask])), np.sum(w * np.cos(dirn[mask])))
            )
            bins.append(WindBin(mean_speed, mean_dir, total))
    return bins


# ---------------------------------------------------------------------------
# file formats

WIND_HEADER = ["t_s", "speed_mps", "dir_rad"]


def load_wind_csv(path) -> WindRecord:
    """Read a wind record from CSV with columns t_s, speed_mps, dir_rad."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"wind record not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != WIND_HEADER:
            raise ConfigError(f"wind CSV must have header {','.join(WIND_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row[:3]])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad wind row {row!r}") from exc
    if not rows:
        raise ConfigError(f"wind record {path} has no samples")
    arr = np.asarray(rows)
    try:
        return WindRecord(arr[:, 0], arr[:, 1], arr[:, 2])
    except ContractError as exc:
        raise ConfigError(f"invalid wind record {path}: {exc}") from exc


def save_wind_csv(record: WindRecord, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(WIND_HEADER)
        for t, s, d in zip(record.times, record.speeds, record.directions):
            writer.writerow([repr(float(t)), repr(float(s)), repr(float(d))])


def load_site_toml(path) -> SiteConfig:
    """Read a site description from TOML."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"site file not found: {path}")
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed site file {path}: {exc}") from exc
    try:
        dom = raw["domain"]
        domain = (tuple(dom["x"]), tuple(dom["y"]), float(dom["z_top"]))
        grid = tuple(int(v) for v in dom["grid"])
        return SiteConfig(
            name=str(raw.get("name", path.stem)),
            sources=np.asarray(raw["sources"], dtype=float),
            receptors=np.asarray(raw["receptors"], dtype=float),
            jar_area=float(raw["jar_area_m2"]),
            v_set=float(raw["v_set_mps"]),
            v_dep=float(raw["v_dep_mps"]),
            z_ref=float(raw["z_ref_m"]),
            duration=float(raw["duration_s"]),
            domain=domain,
            grid=grid,
            synthetic=bool(raw.get("synthetic", False)),
        )
    except KeyError as exc:
        raise ConfigError(f"site file {path} is missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"site file {path} has a malformed value: {exc}") from exc
    except ContractError as exc:
        raise ConfigError(f"invalid site {path}: {exc}") from exc


def save_site_toml(site: SiteConfig, path) -> None:
    """Write a site description as TOML (inverse of :func:`load_site_toml`)."""

    def _rows(arr):
        return ",\n".join("    [" + ", ".join(repr(float(v)) for v in row) + "]" for row in arr)

    (x0, x1), (y0, y1), z_top = site.domain
    text = io.StringIO()
    text.write(f"# {'Synthetic' if site.synthetic else 'Field'} monitoring site description.\n")
    text.write(f'name = "{site.name}"\n')
    text.write(f"synthetic = {'true' if site.synthetic else 'false'}\n\n")
    text.write(f"jar_area_m2 = {float(site.jar_area)!r}\n")
    text.write(f"v_set_mps = {float(site.v_set)!r}\n")
    text.write(f"v_dep_mps = {float(site.v_dep)!r}\n")
    text.write(f"z_ref_m = {float(site.z_ref)!r}\n")
    text.write(f"duration_s = {float(site.duration)!r}\n\n")
    text.write("sources = [\n" + _rows(site.sources) + ",\n]\n\n")
    text.write("receptors = [\n" + _rows(site.receptors) + ",\n]\n\n")
    text.write("[domain]\n")
    text.write(f"x = [{float(x0)!r}, {float(x1)!r}]\n")
    text.write(f"y = [{float(y0)!r}, {float(y1)!r}]\n")
    text.write(f"z_top = {float(z_top)!r}\n")
    text.write(f"grid = [{site.grid[0]}, {site.grid[1]}, {site.grid[2]}]\n")
    Path(path).write_text(text.getvalue())


# ---------------------------------------------------------------------------
# built-in synthetic scene

def trail_like_site(grid: tuple = (24, 24, 24)) -> SiteConfig:
    """Synthetic default scene: a compact 4-stack complex and 9 ground samplers.

    All coordinates are invented. The stacks form a cluster a few grid
    cells across -- individual rates stay soft targets, the way a real
    multi-stack complex looks from a sampling network -- while the
    samplers run a distance ladder from the middle of the complex out to
    ~560 m, so the near/far deposition ratio carries information about
    the vertical profile rather than just the total emission amplitude.
    The domain is auto-sized to 3x the source-receptor bounding box so
    boundary artefacts stay away from the samplers.
    """
    sources = np.array(
        [
            [-182.0, -128.0, 30.0],
            [178.0, 202.0, 35.0],
            [-137.0, 232.0, 18.0],
            [231.0, -188.0, 22.0],
        ]
    )
    receptors = np.array(
        [
            [-330.0, -60.0],
            [350.0, 340.0],
            [-320.0, 390.0],
            [430.0, -350.0],
            [-100.0, -445.0],
            [-40.0, -420.0],
            [-450.0, 80.0],
            [550.0, 30.0],
            [60.0, 560.0],
        ]
    )
    pts = np.vstack([sources[:, :2], receptors])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    centre = 0.5 * (lo + hi)
    half = 1.5 * float(np.max(hi - lo))  # domain extent = 3x the bounding box
    domain = (
        (float(centre[0] - half), float(centre[0] + half)),
        (float(centre[1] - half), float(centre[1] + half)),
        150.0,
    )
    return SiteConfig(
        name="trail-like",
        sources=sources,
        receptors=receptors,
        domain=domain,
        grid=grid,
        synthetic=True,
    )


def trail_like_wind(n_samples: int = 60, duration: float = 3600.0) -> WindRecord:
    """Deterministic hour of wind: speeds 3.5-6.5 m/s with the direction
    veering through a full turn (plus a secondary oscillation), so every
    sampler in the ring sees plume for part of the record and the
    source-receptor map stays well conditioned."""
    k = np.arange(n_samples)
    t = duration * k / n_samples
    speeds = 5.0 + 1.5 * np.sin(2.0 * math.pi * k / n_samples * 1.3 + 1.0)
    directions = (2.0 * math.pi * k / n_samples
                  + 0.9 * np.sin(2.0 * math.pi * k / n_samples * 0.7 + 0.3))
    return WindRecord(t, speeds, directions)
