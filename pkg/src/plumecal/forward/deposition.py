"""Deposition measurements and the source-receptor matrix.

A sampler jar at receptor i collects, over the accumulation window,

    w_i = jar_area * v_set * integral_0^T C(x_i, y_i, 0, t) dt,

evaluated by rectangle-rule time quadrature of the ground-cell values.
Because the transport model is linear in the emission rates, running
one unit-rate simulation per source fills the matrix A with
w = A q for any rate vector q.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractError
from .params import ModelParams
from .site import SiteConfig, WindRecord, bin_wind
from .solver import Grid, _march


def deposition_from_integral(ground_integral, jar_area: float, v_set: float):
    """Deposited mass given the time-integrated ground concentration.

    Kept separate from the transport solve so the proportionality
    w ~ v_set (at fixed field values) is explicit.
    """
    return jar_area * v_set * np.asarray(ground_integral, dtype=float)


def _receptor_ground_integrals(site: SiteConfig, ground_integral: np.ndarray) -> np.ndarray:
    grid = Grid.from_site(site)
    idx = [grid.cell_of(x, y)[:2] for x, y in site.receptors]
    ii = np.array([i for i, _ in idx])
    jj = np.array([j for _, j in idx])
    return ground_integral[:, ii, jj]  # (B, d)


def deposition_measurements(
    params: ModelParams,
    q: np.ndarray,
    site: SiteConfig,
    wind: WindRecord,
    *,
    n_bins: int = 16,
    dt_max: float | None = None,
) -> np.ndarray:
    """Deposited mass [kg] at every receptor for emission rates ``q`` [kg/s]."""
    q = np.asarray(q, dtype=float).ravel()
    if q.shape != (site.n_sources,):
        raise ContractError(f"expected {site.n_sources} rates, got shape {q.shape}")
    bins = bin_wind(wind, site.duration, n_bins)
    _, ground, _ = _march(params, site, bins, q[None, :], dt_max=dt_max)
    integrals = _receptor_ground_integrals(site, ground)[0]
    return deposition_from_integral(integrals, site.jar_area, site.v_set)


@dataclass(frozen=True)
class SourceReceptorMatrix:
    """Linear deposition response: w = values @ q.

    ``values[i, j]`` is the mass deposited at receptor i per unit
    emission rate of source j (units: kg per (kg/s), i.e. seconds-times-
    volume factors folded in).
    """

    values: np.ndarray
    receptor_labels: tuple = ()
    source_labels: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "values", np.atleast_2d(np.asarray(self.values, dtype=float)))
        d, n = self.values.shape
        if not self.receptor_labels:
            object.__setattr__(self, "receptor_labels", tuple(f"R{i+1}" for i in range(d)))
        if not self.source_labels:
            object.__setattr__(self, "source_labels", tuple(f"S{j+1}" for j in range(n)))
        if len(self.receptor_labels) != d or len(self.source_labels) != n:
            raise ContractError("label counts must match the matrix shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def apply(self, q: np.ndarray) -> np.ndarray:
        return self.values @ np.asarray(q, dtype=float)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["receptor", *self.source_labels])
            for label, row in zip(self.receptor_labels, self.values):
                writer.writerow([label, *(repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "SourceReceptorMatrix":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"matrix file not found: {path}")
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "receptor":
                raise ConfigError(f"{path}: expected 'receptor' header column")
            source_labels = tuple(header[1:])
            rows, rec_labels = [], []
            for row in reader:
                if not row:
                    continue
                rec_labels.append(row[0])
                rows.append([float(v) for v in row[1:]])
        if not rows:
            raise ConfigError(f"{path}: no matrix rows")
        return cls(np.asarray(rows), tuple(rec_labels), source_labels)


def source_receptor_matrix(
    params: ModelParams,
    site: SiteConfig,
    wind: WindRecord,
    *,
    n_bins: int = 16,
    unit_rate: float = 1.0,
    dt_max: float | None = None,
) -> SourceReceptorMatrix:
    """Assemble A by one unit-rate run per source.

    The runs share the time loop (they differ only in the source term),
    so the cost is close to a single simulation rather than n of them.
    ``unit_rate`` rescales the column inputs; values are per that rate.
    """
    if unit_rate <= 0:
        raise ContractError(f"unit_rate must be positive, got {unit_rate}")
    bins = bin_wind(wind, site.duration, n_bins)
    rates = unit_rate * np.eye(site.n_sources)
    _, ground, _ = _march(params, site, bins, rates, dt_max=dt_max)
    integrals = _receptor_ground_integrals(site, ground)  # (n, d)
    w_cols = deposition_from_integral(integrals, site.jar_area, site.v_set)
    return SourceReceptorMatrix(w_cols.T / unit_rate)
