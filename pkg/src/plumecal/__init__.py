"""plumecal: dispersion-model calibration and source-term inversion.

Calibrates the empirical parameters of an advection-diffusion plume
model and infers point-source emission rates from cumulative deposition
measurements, via space-filling designs, per-entry Gaussian-process
emulation of the source-receptor map, Sobol screening, and adaptive
Metropolis-Hastings sampling of the joint posterior.
"""

__version__ = "0.1.0"

from .pipeline import PipelineConfig  # noqa: E402  (public entry point)

__all__ = ["PipelineConfig", "__version__"]
