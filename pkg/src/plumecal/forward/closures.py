"""Boundary-layer closures: wind profile and eddy diffusivities.

All functions accept scalar or array ``z`` and broadcast. Heights below
the cutoff ``z_cut`` are evaluated at the cutoff, which keeps every
profile finite down to the ground.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .params import VON_KARMAN, ModelParams


def friction_velocity(params: ModelParams, v_r: float, z_r: float) -> float:
    """Friction velocity v* = kappa * v_r / ln(z_r / z0).

    Requires z_r > z0 so the logarithm is positive.
    """
    if z_r <= params.z0:
        raise ContractError(
            f"reference height z_r={z_r} must exceed roughness length z0={params.z0}"
        )
    if v_r < 0:
        raise ContractError(f"reference wind speed v_r={v_r} must be >= 0")
    return VON_KARMAN * v_r / np.log(z_r / params.z0)


def stability_correction(s):
    """Monin-Obukhov stability function phi(s).

    phi(s) = 1 + 4.7 s      for s >= 0
           = (1 - 15 s)^(-1/2)  for s < 0
    """
    s = np.asarray(s, dtype=float)
    out = np.where(s >= 0.0, 1.0 + 4.7 * s, (1.0 - 15.0 * np.minimum(s, 0.0)) ** -0.5)
    return out if out.ndim else float(out)


def wind_profile(params: ModelParams, z, v_r: float, z_r: float = 10.0):
    """Horizontal wind speed at height z from the power law.

    Returns ``v_r * (max(z, z_cut) / z_r) ** p``.
    """
    if v_r < 0:
        raise ContractError(f"reference wind speed v_r={v_r} must be >= 0")
    if z_r <= 0:
        raise ContractError(f"reference height z_r={z_r} must be positive")
    zeff = np.maximum(np.asarray(z, dtype=float), params.z_cut)
    out = v_r * (zeff / z_r) ** params.p
    return out if out.ndim else float(out)


def eddy_diffusivities(params: ModelParams, z, v_r: float, z_r: float = 10.0):
    """Horizontal and vertical eddy diffusivities (D11, D33) at height z.

    The vertical diffusivity follows the surface-layer form

        D33 = kappa * v* * max(z, z_cut) / phi(max(z, z_cut) / L),

    and the horizontal one the convective scaling

        D11 = D22 = v* * z_i^(3/4) * (-kappa * L)^(-1/3) / 10,

    which requires L < 0 (enforced by :class:`ModelParams`).

    Returns
    -------
    (D11, D33) : tuple
        Scalars for scalar input, arrays following ``z`` otherwise.
        D11 is constant in z but broadcast to the same shape for
        convenience.
    """
    vstar = friction_velocity(params, v_r, z_r)
    zeff = np.maximum(np.asarray(z, dtype=float), params.z_cut)
    d33 = VON_KARMAN * vstar * zeff / stability_correction(zeff / params.L)
    d11 = vstar * params.z_i**0.75 * (-VON_KARMAN * params.L) ** (-1.0 / 3.0) / 10.0
    d11 = np.broadcast_to(np.asarray(d11, dtype=float), np.shape(zeff)).copy()
    if d33.ndim:
        return d11, d33
    return float(d11), float(d33)
