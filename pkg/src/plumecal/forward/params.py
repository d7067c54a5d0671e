"""Dispersion-model parameters and their admissible ranges."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError

#: von Kármán constant used by the boundary-layer closures.
VON_KARMAN = 0.4


@dataclass(frozen=True)
class ModelParams:
    """Empirical closure parameters of the dispersion model.

    Parameters
    ----------
    p : float
        Wind power-law exponent, in [0, 0.6].
    z0 : float
        Surface roughness length [m], in (0, 3].
    L : float
        Monin-Obukhov length [m]; must be negative (unstable
        stratification). Admissible range is [-600, 0).
    z_i : float
        Mixing-layer height [m]; fixed at 100 by default.
    z_cut : float
        Near-ground cutoff height [m] below which vertical profiles are
        evaluated at z_cut; fixed at 2 by default.
    """

    p: float
    z0: float
    L: float
    z_i: float = 100.0
    z_cut: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 0.6:
            raise ContractError(f"power-law exponent p={self.p} outside [0, 0.6]")
        if not 0.0 < self.z0 <= 3.0:
            raise ContractError(f"roughness length z0={self.z0} outside (0, 3]")
        if not -600.0 <= self.L < 0.0:
            raise ContractError(
                f"Monin-Obukhov length L={self.L} must lie in [-600, 0); "
                "stable/neutral stratification is outside the model family"
            )
        if self.z_i <= 0.0:
            raise ContractError(f"mixing-layer height z_i={self.z_i} must be positive")
        if not 0.0 < self.z_cut < self.z_i:
            raise ContractError(f"cutoff z_cut={self.z_cut} outside (0, z_i)")

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.z0, self.L], dtype=float)


# Default calibration box.  The physical ranges are p in [0, 0.6],
# z0 in (0, 3], L in [-600, 0); the open endpoints are clipped slightly
# inward because both closures are singular there (v* -> 0 as z0 -> 0+,
# D33 -> infinity as L -> 0-).
DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "p": (0.0, 0.6),
    "z0": (0.01, 3.0),
    "L": (-600.0, -2.0),
}


@dataclass(frozen=True)
class ParameterBox:
    """Axis-aligned box of admissible parameter vectors.

    Used as the sampling domain for designs, the input-scaling reference
    for emulators, and the support of the uniform parameter prior.
    """

    names: tuple[str, ...] = ("p", "z0", "L")
    ranges: tuple[tuple[float, float], ...] = field(
        default_factory=lambda: tuple(DEFAULT_RANGES[n] for n in ("p", "z0", "L"))
    )

    def __post_init__(self):
        if len(self.names) != len(self.ranges):
            raise ContractError("parameter names and ranges must align")
        for name, (lo, hi) in zip(self.names, self.ranges):
            if not lo < hi:
                raise ContractError(f"empty range for {name}: [{lo}, {hi}]")

    @property
    def dim(self) -> int:
        return len(self.names)

    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.ranges])

    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.ranges])

    def to_unit(self, theta: np.ndarray) -> np.ndarray:
        """Affine map from physical coordinates onto [0, 1]^m."""
        lo, hi = self.lower(), self.upper()
        return (np.asarray(theta, dtype=float) - lo) / (hi - lo)

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_unit`."""
        lo, hi = self.lower(), self.upper()
        return lo + np.asarray(u, dtype=float) * (hi - lo)

    def contains(self, theta: np.ndarray) -> bool:
        t = np.asarray(theta, dtype=float)
        return bool(np.all(t >= self.lower()) and np.all(t <= self.upper()))

    def widths(self) -> np.ndarray:
        return self.upper() - self.lower()
