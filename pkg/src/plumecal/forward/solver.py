"""Finite-volume transport solver for the dispersion model.

Solves

    dC/dt + div(v C - D grad C) = sum_j q_j delta(x - x_j),   C(., 0) = 0

on a cell-centred Cartesian grid. The velocity is the power-law wind
profile (uniform direction per wind bin, speed varying with height)
plus a constant settling velocity -v_set in z. Diffusion is diagonal:
horizontal D11 = D22 (constant per bin) and vertical D33(z) from the
boundary-layer closures.

Scheme: first-order upwind advection and second-order central horizontal
diffusion, both explicit at 0.9x their joint stability limit; vertical
diffusion is backward-Euler (one shared tridiagonal solve per step —
the closure's D33 is unbounded as L -> 0-, which would drive a fully
explicit step to useless sizes). The combination is conservative and
positivity-preserving.

Boundaries: upwind/lateral/top faces use a zero-value far field on
inflow and zero-gradient outflow otherwise; the ground face carries the
Robin balance (v_set C - D33 dC/dz = v_dep C), i.e. the bottom-face flux
of the lowest cells is the deposition sink v_dep * C. A "closed" mode
zeroes every boundary flux for conservation testing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from ..errors import CflError, ContractError, NumericsError
from .closures import eddy_diffusivities, wind_profile
from .params import ModelParams
from .site import SiteConfig, WindBin, WindRecord, bin_wind, flow_vector


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid over the site domain."""

    x0: float
    x1: float
    y0: float
    y1: float
    z_top: float
    nx: int
    ny: int
    nz: int

    @classmethod
    def from_site(cls, site: SiteConfig) -> "Grid":
        (x0, x1), (y0, y1), z_top = site.domain
        nx, ny, nz = site.grid
        return cls(x0, x1, y0, y1, z_top, nx, ny, nz)

    @property
    def dx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def dy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    @property
    def dz(self) -> float:
        return self.z_top / self.nz

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def z_centres(self) -> np.ndarray:
        return (np.arange(self.nz) + 0.5) * self.dz

    def cell_of(self, x: float, y: float, z: float = 0.0) -> tuple[int, int, int]:
        """Indices of the cell containing (x, y, z); clipped to the grid."""
        i = min(max(int((x - self.x0) / self.dx), 0), self.nx - 1)
        j = min(max(int((y - self.y0) / self.dy), 0), self.ny - 1)
        k = min(max(int(z / self.dz), 0), self.nz - 1)
        return i, j, k


@dataclass
class ConcentrationField:
    """One snapshot of the concentration field [kg/m^3]."""

    grid: Grid
    time: float
    values: np.ndarray  # (nx, ny, nz)

    def total_mass(self) -> float:
        return float(self.values.sum()) * self.grid.cell_volume

    def value_at(self, x: float, y: float, z: float) -> float:
        return float(self.values[self.grid.cell_of(x, y, z)])

    def to_csv(self, path) -> None:
        """Write the slice as x_m,y_m,z_m,conc rows (one per cell)."""
        g = self.grid
        xc = g.x0 + (np.arange(g.nx) + 0.5) * g.dx
        yc = g.y0 + (np.arange(g.ny) + 0.5) * g.dy
        zc = g.z_centres()
        with open(path, "w") as fh:
            fh.write("x_m,y_m,z_m,conc\n")
            for i in range(g.nx):
                for j in range(g.ny):
                    for k in range(g.nz):
                        fh.write(
                            f"{float(xc[i])!r},{float(yc[j])!r},{float(zc[k])!r},"
                            f"{float(self.values[i, j, k])!r}\n"
                        )


def _bin_profiles(params: ModelParams, site: SiteConfig, wbin: WindBin, grid: Grid):
    """Per-bin velocity and diffusivity profiles (all functions of z only)."""
    zc = grid.z_centres()
    speed = wind_profile(params, zc, wbin.speed, site.z_ref)
    ex, ey = flow_vector(1.0, wbin.direction)
    ux = ex * speed
    uy = ey * speed
    d11, _ = eddy_diffusivities(params, params.z_cut, wbin.speed, site.z_ref)
    zf = np.arange(1, grid.nz) * grid.dz  # interior face heights
    _, d33_faces = eddy_diffusivities(params, zf, wbin.speed, site.z_ref)
    _, d33_top = eddy_diffusivities(params, grid.z_top, wbin.speed, site.z_ref)
    return ux, uy, float(d11), np.atleast_1d(d33_faces), float(d33_top)


def _stability_rate(grid: Grid, site: SiteConfig, ux, uy, d11) -> float:
    """Max per-cell outflow rate of the explicit part (1/s)."""
    adv = float(np.max(np.abs(ux) / grid.dx + np.abs(uy) / grid.dy))
    hdiff = 2.0 * d11 * (1.0 / grid.dx**2 + 1.0 / grid.dy**2)
    ground = max(site.v_set, site.v_dep) / grid.dz
    return adv + hdiff + ground


def _vertical_system(grid: Grid, d33_faces, d33_top, dt: float, closed: bool):
    """Banded (I + dt*A) for backward-Euler vertical diffusion.

    The matrix is shared by every column and every batched field: D33
    depends only on height within a wind bin.
    """
    nz = grid.nz
    r = dt / grid.dz**2
    upper = np.zeros(nz)
    lower = np.zeros(nz)
    main = np.ones(nz)
    cpl = r * d33_faces  # interior faces between k and k+1
    main[:-1] += cpl
    main[1:] += cpl
    upper[1:] = -cpl
    lower[:-1] = -cpl
    if not closed:
        main[-1] += r * d33_top  # zero-value ghost above the top face
    return np.vstack([upper, main, lower])


def _march(
    params: ModelParams,
    site: SiteConfig,
    bins: list[WindBin],
    rates: np.ndarray,
    *,
    boundary: str = "open",
    dt_max: float | None = None,
    output_times: tuple = (),
):
    """Advance a batch of fields (one per row of ``rates``) through the bins.

    ``rates`` has shape (B, n_sources): field b is driven by its own
    emission-rate vector, so a unit-matrix batch yields all the
    source-receptor columns in one sweep of the time loop.

    Returns (final fields (B,nx,ny,nz), ground time-integral (B,nx,ny),
    snapshots list of (t, fields copy)).
    """
    if boundary not in ("open", "closed"):
        raise ContractError(f"boundary must be 'open' or 'closed', got {boundary!r}")
    closed = boundary == "closed"
    grid = Grid.from_site(site)
    rates = np.atleast_2d(np.asarray(rates, dtype=float))
    if rates.shape[1] != site.n_sources:
        raise ContractError(
            f"rates have {rates.shape[1]} columns for {site.n_sources} sources"
        )
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ContractError("emission rates must be finite and >= 0")
    nb = rates.shape[0]
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    dx, dy, dz = grid.dx, grid.dy, grid.dz

    # dirac sources: density q/V in the containing cell
    src_density = np.zeros((nb, nx, ny, nz))
    for j, (sx, sy, sz) in enumerate(site.sources):
        ci, cj, ck = grid.cell_of(sx, sy, sz)
        src_density[:, ci, cj, ck] += rates[:, j] / grid.cell_volume

    profiles = [_bin_profiles(params, site, b, grid) for b in bins]
    admissible = 0.9 / max(
        _stability_rate(grid, site, ux, uy, d11) for ux, uy, d11, _, _ in profiles
    )
    if dt_max is not None:
        if dt_max <= 0:
            raise ContractError(f"dt_max must be positive, got {dt_max}")
        if dt_max > admissible:
            raise CflError(dt_max, admissible)

    C = np.zeros((nb, nx, ny, nz))
    ground_integral = np.zeros((nb, nx, ny))
    out_times = sorted(output_times)
    out_ptr = 0
    snapshots: list[tuple[float, np.ndarray]] = []
    t = 0.0

    for wbin, (ux, uy, d11, d33_faces, d33_top) in zip(bins, profiles):
        rate = _stability_rate(grid, site, ux, uy, d11)
        dt_lim = 0.9 / rate
        if dt_max is not None:
            dt_lim = min(dt_lim, dt_max)
        n_steps = max(1, math.ceil(wbin.duration / dt_lim))
        dt = wbin.duration / n_steps

        upx, umx = np.maximum(ux, 0.0), np.minimum(ux, 0.0)
        upy, umy = np.maximum(uy, 0.0), np.minimum(uy, 0.0)
        ab = _vertical_system(grid, d33_faces, d33_top, dt, closed)
        kx = d11 / dx
        ky = d11 / dy
        inflow_w = upx > 0.0
        inflow_e = umx < 0.0
        inflow_s = upy > 0.0
        inflow_n = umy < 0.0

        for _ in range(n_steps):
            ground_integral += C[:, :, :, 0] * dt

            # x faces: upwind advection against a zero far-field ghost
            Cp = np.concatenate(
                [np.zeros((nb, 1, ny, nz)), C, np.zeros((nb, 1, ny, nz))], axis=1
            )
            Fx = upx * Cp[:, :-1] + umx * Cp[:, 1:]
            Fx[:, 1:-1] -= kx * (C[:, 1:] - C[:, :-1])
            if not closed:
                Fx[:, 0] -= np.where(inflow_w, kx * C[:, 0], 0.0)
                Fx[:, -1] += np.where(inflow_e, kx * C[:, -1], 0.0)
            else:
                Fx[:, 0] = 0.0
                Fx[:, -1] = 0.0

            Cp = np.concatenate(
                [np.zeros((nb, nx, 1, nz)), C, np.zeros((nb, nx, 1, nz))], axis=2
            )
            Fy = upy * Cp[:, :, :-1] + umy * Cp[:, :, 1:]
            Fy[:, :, 1:-1] -= ky * (C[:, :, 1:] - C[:, :, :-1])
            if not closed:
                Fy[:, :, 0] -= np.where(inflow_s, ky * C[:, :, 0], 0.0)
                Fy[:, :, -1] += np.where(inflow_n, ky * C[:, :, -1], 0.0)
            else:
                Fy[:, :, 0] = 0.0
                Fy[:, :, -1] = 0.0

            # z faces: settling (w = -v_set, upwind takes the cell above);
            # the ground face carries the Robin deposition sink instead.
            Fz = np.empty((nb, nx, ny, nz + 1))
            Fz[:, :, :, :-1] = -site.v_set * C
            Fz[:, :, :, -1] = 0.0
            if closed:
                Fz[:, :, :, 0] = 0.0
            else:
                Fz[:, :, :, 0] = -site.v_dep * C[:, :, :, 0]

            C = C + dt * (
                src_density
                - (Fx[:, 1:] - Fx[:, :-1]) / dx
                - (Fy[:, :, 1:] - Fy[:, :, :-1]) / dy
                - (Fz[:, :, :, 1:] - Fz[:, :, :, :-1]) / dz
            )

            # implicit vertical diffusion: one banded solve, all columns
            rhs = C.reshape(-1, nz).T
            C = solve_banded((1, 1), ab, rhs, check_finite=False).T.reshape(C.shape)

            t += dt
            if not np.all(np.isfinite(C)):
                bad = np.argwhere(~np.isfinite(C))[0]
                raise NumericsError(
                    f"non-finite concentration at t={t:.6g} s in cell "
                    f"(field={bad[0]}, i={bad[1]}, j={bad[2]}, k={bad[3]})"
                )
            while out_ptr < len(out_times) and t >= out_times[out_ptr] - 1e-9:
                snapshots.append((t, C.copy()))
                out_ptr += 1

    return C, ground_integral, snapshots


def solve_concentration(
    params: ModelParams,
    q: np.ndarray,
    site: SiteConfig,
    wind: WindRecord,
    *,
    n_bins: int = 16,
    output_times=None,
    boundary: str = "open",
    dt_max: float | None = None,
) -> list[ConcentrationField]:
    """Concentration snapshots for emission rates ``q`` [kg/s].

    Returns one :class:`ConcentrationField` per requested output time
    (default: the end of the accumulation window only).
    """
    q = np.asarray(q, dtype=float).ravel()
    bins = bin_wind(wind, site.duration, n_bins)
    if output_times is None:
        output_times = (site.duration,)
    final, _, snaps = _march(
        params,
        site,
        bins,
        q[None, :],
        boundary=boundary,
        dt_max=dt_max,
        output_times=tuple(output_times),
    )
    grid = Grid.from_site(site)
    fields = [ConcentrationField(grid, tt, arr[0]) for tt, arr in snaps]
    if not fields:
        fields = [ConcentrationField(grid, site.duration, final[0])]
    return fields
