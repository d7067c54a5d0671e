"""Forward dispersion model: closures, transport solver, depositions."""

from .closures import (
    eddy_diffusivities,
    friction_velocity,
    stability_correction,
    wind_profile,
)
from .deposition import (
    SourceReceptorMatrix,
    deposition_from_integral,
    deposition_measurements,
    source_receptor_matrix,
)
from .params import DEFAULT_RANGES, VON_KARMAN, ModelParams, ParameterBox
from .site import (
    SiteConfig,
    WindBin,
    WindRecord,
    bin_wind,
    flow_vector,
    load_site_toml,
    load_wind_csv,
    save_site_toml,
    save_wind_csv,
    trail_like_site,
    trail_like_wind,
)
from .solver import ConcentrationField, Grid, solve_concentration

__all__ = [
    "ConcentrationField",
    "DEFAULT_RANGES",
    "Grid",
    "ModelParams",
    "ParameterBox",
    "SiteConfig",
    "SourceReceptorMatrix",
    "VON_KARMAN",
    "WindBin",
    "WindRecord",
    "bin_wind",
    "deposition_from_integral",
    "deposition_measurements",
    "eddy_diffusivities",
    "flow_vector",
    "friction_velocity",
    "load_site_toml",
    "load_wind_csv",
    "save_site_toml",
    "save_wind_csv",
    "solve_concentration",
    "source_receptor_matrix",
    "stability_correction",
    "trail_like_site",
    "trail_like_wind",
    "wind_profile",
]
