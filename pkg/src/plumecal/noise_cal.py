"""Measurement-noise calibration.

The noise variance λ is chosen by minimizing

    J(λ) = E_post[ (‖Â(θ)q − w‖ + ‖q − q_eng‖) / 2 ],

the posterior expectation (under the λ-dependent posterior) of an
equally weighted compromise between data misfit and distance from the
engineering rate estimates. Each candidate λ gets a fresh MCMC run; the
resulting (λ, J) pairs are interpolated by a 1-D GP over log10 λ whose
mean is minimized on a fine grid. The implied signal-to-noise ratio is
reported as RMS(w)/√λ.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import gp
from .bayes import (
    McmcParams,
    NoiseModel,
    PriorSpec,
    adaptive_mh,
    make_log_posterior,
    postprocess_chain,
)
from .errors import ContractError, NumericsError
from .seeds import child_seed

__all__ = [
    "JEvaluation",
    "j_functional",
    "fit_j_curve",
    "CalibrationResult",
    "calibrate_lambda",
    "snr_report",
]

#: default MCMC budget for one J evaluation — J is a low-precision
#: integral, so a short chain suffices (budget is a knob)
J_CHAIN_STEPS = 100_000


@dataclass(frozen=True)
class JEvaluation:
    """One Monte Carlo estimate of J at a candidate noise variance."""

    lam: float
    j: float
    stderr: float          # naive MC standard error over retained samples
    acceptance_rate: float
    seed: int


def _default_init(prior: PriorSpec) -> np.ndarray:
    box = prior.box
    centre = 0.5 * (box.lower() + box.upper())
    return np.concatenate([centre, prior.modes()])


def j_functional(
    lam: float,
    emat,
    w,
    prior: PriorSpec,
    q_eng,
    mcmc: McmcParams | None = None,
    seed: int = 0,
    init=None,
) -> JEvaluation:
    """Estimate J(λ) with a fresh posterior chain at noise variance λ.

    Both integrand terms are plain Euclidean norms (not squared), each
    nonnegative, so J ≥ 0 always. The standard error is the naive
    sample-mean error over the retained (burned/thinned) states; chain
    autocorrelation makes it optimistic, which is acceptable for
    locating the minimum of a smooth curve.
    """
    if not (lam > 0 and math.isfinite(lam)):
        raise ContractError(f"noise variance must be positive, got {lam}")
    w = np.asarray(w, dtype=float).ravel()
    q_eng = np.asarray(q_eng, dtype=float).ravel()
    if len(q_eng) != prior.n_sources:
        raise ContractError("q_eng length must match the prior's source count")
    mcmc = mcmc or McmcParams(n_steps=J_CHAIN_STEPS)
    init = _default_init(prior) if init is None else np.asarray(init, dtype=float)

    log_post = make_log_posterior(emat, w, prior, NoiseModel(lam))
    chain = adaptive_mh(log_post, init, mcmc, seed=seed)
    kept = postprocess_chain(chain)
    n_theta = prior.box.dim
    values = np.empty(len(kept))
    for k, x in enumerate(kept):
        theta, q = x[:n_theta], x[n_theta:]
        misfit = float(np.linalg.norm(emat.predict(theta) @ q - w))
        anchor = float(np.linalg.norm(q - q_eng))
        values[k] = 0.5 * (misfit + anchor)
    j = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return JEvaluation(
        lam=float(lam), j=j, stderr=stderr,
        acceptance_rate=chain.acceptance_rate, seed=seed,
    )


def fit_j_curve(lambdas, j_values, n_grid: int = 1000):
    """Interpolate (λ, J) pairs and locate the minimizing λ.

    A squared-exponential GP over log10 λ is fitted through the pairs
    and its mean minimized on an ``n_grid``-point grid spanning the
    candidate range. Returns ``(lam_star, curve, boundary)`` where
    ``curve`` is an (n_grid, 2) array of (λ, mean-J) samples and
    ``boundary`` flags a minimum at either end of the span (the true
    minimum may lie outside the candidates).
    """
    lams = np.asarray(lambdas, dtype=float).ravel()
    js = np.asarray(j_values, dtype=float).ravel()
    if len(lams) != len(js) or len(lams) < 2:
        raise ContractError("need at least two (lambda, J) pairs to fit a curve")
    if np.any(lams <= 0):
        raise ContractError("candidate noise variances must be positive")
    order = np.argsort(lams)
    lams, js = lams[order], js[order]
    x = np.log10(lams)
    emu = gp.fit(x[:, None], js, "squared_exponential",
                 ranges=[(float(x[0]), float(x[-1]))])
    grid = np.linspace(x[0], x[-1], n_grid)
    mean, _ = emu.predict_many(grid[:, None])
    idx = int(np.argmin(mean))
    lam_star = float(10.0 ** grid[idx])
    boundary = idx in (0, n_grid - 1)
    curve = np.column_stack([10.0**grid, mean])
    return lam_star, curve, boundary


@dataclass(frozen=True)
class CalibrationResult:
    """Outcome of the λ sweep: evaluations, fitted curve, and λ*."""

    evaluations: tuple          # JEvaluation, one per successful candidate
    lam_star: float
    boundary: bool
    curve: np.ndarray           # (n_grid, 2) of (lambda, fitted J mean)
    snr: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("lambda,J,stderr\n")
        for e in self.evaluations:
            buf.write(f"{e.lam!r},{e.j!r},{e.stderr!r}\n")
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "lambda_star": self.lam_star,
            "boundary": self.boundary,
            "snr": self.snr,
            "evaluations": [
                {"lambda": e.lam, "J": e.j, "stderr": e.stderr,
                 "acceptance_rate": e.acceptance_rate, "seed": e.seed}
                for e in self.evaluations
            ],
            "curve_lambda": [float(v) for v in self.curve[:, 0]],
            "curve_j": [float(v) for v in self.curve[:, 1]],
        }


def calibrate_lambda(
    emat,
    w,
    prior: PriorSpec,
    q_eng,
    lambdas,
    mcmc: McmcParams | None = None,
    master_seed: int = 0,
) -> CalibrationResult:
    """Sweep candidate noise variances and pick the J-minimizing one.

    Candidates must number at least three and span at least two decades.
    Each candidate gets an independent chain seed derived from the
    master seed; failed evaluations are skipped with a warning, and the
    sweep errors out only if none survive.
    """
    lams = np.asarray(lambdas, dtype=float).ravel()
    if len(lams) < 3:
        raise ContractError(f"need at least 3 candidate variances, got {len(lams)}")
    if np.any(lams <= 0):
        raise ContractError("candidate noise variances must be positive")
    span = float(np.max(lams) / np.min(lams))
    if span < 100.0:
        raise ContractError(
            f"candidates must span at least two decades, got {span:.3g}x"
        )
    evaluations = []
    for i, lam in enumerate(np.sort(lams)):
        seed = child_seed(master_seed, f"noise-lambda-{i}")
        try:
            evaluations.append(
                j_functional(float(lam), emat, w, prior, q_eng, mcmc, seed=seed)
            )
        except NumericsError as exc:
            warnings.warn(f"J({lam:g}) evaluation failed and was skipped: {exc}",
                          stacklevel=2)
    if not evaluations:
        raise NumericsError("every J(lambda) evaluation failed")
    lam_star, curve, boundary = fit_j_curve(
        [e.lam for e in evaluations], [e.j for e in evaluations]
    )
    return CalibrationResult(
        evaluations=tuple(evaluations),
        lam_star=lam_star,
        boundary=boundary,
        curve=curve,
        snr=snr_report(w, lam_star),
    )


def snr_report(w, lam_star: float) -> float:
    """Signal-to-noise ratio RMS(w)/√λ implied by a noise variance."""
    if not (lam_star > 0 and math.isfinite(lam_star)):
        raise ContractError(f"noise variance must be positive, got {lam_star}")
    w = np.asarray(w, dtype=float).ravel()
    if len(w) == 0:
        raise ContractError("need at least one measurement")
    return float(np.sqrt(np.mean(w**2)) / math.sqrt(lam_star))
