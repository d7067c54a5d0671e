"""Priors, likelihood, adaptive Metropolis–Hastings, and posterior summaries.

The unknowns are the model parameters θ (uniform box prior) and the
source rates q (independent gamma priors). Each gamma prior is pinned
by two engineering constraints: its mode equals the engineering
estimate q_eng, and its 0.99 quantile equals τ·q_eng, where τ > 1
controls the spread. The sampler is an adaptive random-walk
Metropolis scheme: an isotropic warm-up for the first 2·dim steps,
then a mixture proposal built on the running empirical covariance of
the chain. Point estimates come from marginal gamma fits (rates) and
Gaussian kernel density modes (model parameters); uncertainty is a
credible-ball radius per coordinate plus a covariance matrix about the
point-estimate vector.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, special, stats

from .errors import ConfigError, ContractError, NumericsError
from .forward.params import ParameterBox

__all__ = [
    "gamma_from_mode_quantile",
    "PriorSpec",
    "build_priors",
    "log_prior",
    "NoiseModel",
    "log_likelihood",
    "make_log_posterior",
    "McmcParams",
    "PosteriorChain",
    "adaptive_mh",
    "postprocess_chain",
    "credible_interval",
    "InferenceSummary",
    "point_estimates",
    "load_chain_csv",
]


def gamma_from_mode_quantile(q_eng: float, tau: float) -> tuple[float, float]:
    """Gamma shape/rate (α, β) with mode q_eng and 0.99-quantile τ·q_eng.

    The mode constraint fixes β = (α−1)/q_eng for any α > 1, reducing
    the problem to a 1-D root find in α: larger α means a tighter prior,
    so the 0.99 quantile decreases monotonically toward q_eng as α grows
    and the bracket is searched on a log scale.

    Raises
    ------
    ContractError
        If q_eng ≤ 0 or τ ≤ 1.
    NumericsError
        If no bracket contains the root (reported with the searched range).
    """
    if q_eng <= 0:
        raise ContractError(f"engineering estimate must be positive, got {q_eng}")
    if tau <= 1:
        raise ContractError(f"spread factor must exceed 1, got {tau}")

    def quantile_gap(alpha: float) -> float:
        beta = (alpha - 1.0) / q_eng
        return stats.gamma.ppf(0.99, a=alpha, scale=1.0 / beta) - tau * q_eng

    lo, hi = 1.0 + 1e-9, 1e7
    if quantile_gap(lo) < 0 or quantile_gap(hi) > 0:
        raise NumericsError(
            f"no gamma shape in [{lo:g}, {hi:g}] satisfies the quantile "
            f"constraint for q_eng={q_eng:g}, tau={tau:g}"
        )
    alpha = optimize.brentq(quantile_gap, lo, hi, xtol=1e-13, rtol=1e-15)
    beta = (alpha - 1.0) / q_eng
    return float(alpha), float(beta)


@dataclass(frozen=True)
class PriorSpec:
    """Uniform box over θ plus independent gamma priors over q."""

    box: ParameterBox
    alphas: np.ndarray
    betas: np.ndarray
    tau: float

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=float)
        betas = np.asarray(self.betas, dtype=float)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "betas", betas)
        if alphas.shape != betas.shape or alphas.ndim != 1:
            raise ContractError("alphas and betas must be 1-D and aligned")
        if np.any(alphas <= 1.0):
            raise ContractError("gamma shapes must exceed 1 so the mode exists")
        if np.any(betas <= 0.0):
            raise ContractError("gamma rates must be positive")

    @property
    def n_sources(self) -> int:
        return len(self.alphas)

    @property
    def dim(self) -> int:
        return len(self.box.names) + self.n_sources

    def modes(self) -> np.ndarray:
        return (self.alphas - 1.0) / self.betas

    def q_quantile(self, mass: float) -> np.ndarray:
        return stats.gamma.ppf(mass, a=self.alphas, scale=1.0 / self.betas)


def build_priors(q_eng, tau: float, box: ParameterBox) -> PriorSpec:
    """Construct the joint prior from engineering rate estimates."""
    q_eng = np.asarray(q_eng, dtype=float).ravel()
    pairs = [gamma_from_mode_quantile(q, tau) for q in q_eng]
    return PriorSpec(
        box=box,
        alphas=np.array([p[0] for p in pairs]),
        betas=np.array([p[1] for p in pairs]),
        tau=float(tau),
    )


def log_prior(prior: PriorSpec, theta, q) -> float:
    """Joint log prior density; −inf outside the support."""
    theta = np.asarray(theta, dtype=float)
    q = np.asarray(q, dtype=float)
    if not prior.box.contains(theta):
        return -math.inf
    if np.any(q <= 0.0):
        return -math.inf
    a, b = prior.alphas, prior.betas
    gamma_part = float(
        np.sum(a * np.log(b) - special.gammaln(a) + (a - 1.0) * np.log(q) - b * q)
    )
    uniform_part = -float(np.sum(np.log(prior.box.widths())))
    return gamma_part + uniform_part


@dataclass(frozen=True)
class NoiseModel:
    """Homoscedastic Gaussian measurement noise with variance lam."""

    lam: float

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ContractError(f"noise variance must be positive, got {self.lam}")

    def sigma(self, d: int) -> np.ndarray:
        return self.lam * np.eye(d)


def log_likelihood(a_matrix, q, w, noise: NoiseModel) -> float:
    """Gaussian log likelihood of measurements w given predicted A(θ)q.

    Carries the full normalization −(d/2)·log(2πλ) so values remain
    comparable across different noise variances (noise calibration
    compares them); the quadratic term is −‖Aq − w‖²/(2λ).
    """
    a_matrix = np.asarray(a_matrix, dtype=float)
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    if a_matrix.shape != (len(w), len(q)):
        raise ContractError(
            f"matrix shape {a_matrix.shape} incompatible with d={len(w)}, n={len(q)}"
        )
    r = a_matrix @ q - w
    d = len(w)
    return float(-0.5 * d * math.log(2.0 * math.pi * noise.lam)
                 - 0.5 * (r @ r) / noise.lam)


def make_log_posterior(emat, w, prior: PriorSpec, noise: NoiseModel):
    """Unnormalized log posterior over the stacked state x = (θ, q).

    The prior is evaluated first and short-circuits to −inf outside the
    support, so the emulator is never queried out of its box.
    """
    w = np.asarray(w, dtype=float)
    n_theta = len(prior.box.names)

    def log_post(x: np.ndarray) -> float:
        theta, q = x[:n_theta], x[n_theta:]
        lp = log_prior(prior, theta, q)
        if lp == -math.inf:
            return -math.inf
        return lp + log_likelihood(emat.predict(theta), q, w, noise)

    return log_post


@dataclass(frozen=True)
class McmcParams:
    """Adaptive random-walk tuning constants."""

    n_steps: int = 1_000_000
    beta: float = 0.05
    gamma1: float = 0.01
    gamma2: float = 2.38**2
    gamma3: float = 0.1**2

    def __post_init__(self):
        if self.n_steps < 1:
            raise ContractError("chain length must be at least 1")
        if not (0.0 < self.beta < 1.0):
            raise ContractError("mixture weight must lie in (0, 1)")
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ContractError("proposal scales must be positive")


@dataclass
class PosteriorChain:
    """A finished MCMC run: states, accept flags, and log-posteriors."""

    states: np.ndarray        # (N, dim)
    accepted: np.ndarray      # (N,) bool; index 0 is the initial state
    logpost: np.ndarray       # (N,)
    n_nonfinite: int          # proposals whose log-posterior was non-finite
    seed: int
    params: McmcParams

    @property
    def acceptance_rate(self) -> float:
        if len(self.accepted) < 2:
            return 0.0
        return float(self.accepted[1:].mean())

    def to_csv(self, names) -> str:
        names = list(names)
        if len(names) != self.states.shape[1]:
            raise ContractError("column names must match the chain dimension")
        buf = io.StringIO()
        buf.write("step,accepted,logpost," + ",".join(names) + "\n")
        for k in range(len(self.states)):
            row = ",".join(repr(float(v)) for v in self.states[k])
            buf.write(f"{k},{int(self.accepted[k])},{float(self.logpost[k])!r},{row}\n")
        return buf.getvalue()


def load_chain_csv(path) -> tuple[list, np.ndarray, np.ndarray, np.ndarray]:
    """Read a chain CSV back as (names, states, accepted, logpost)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"chain file not found: {path}")
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    if header[:3] != ["step", "accepted", "logpost"]:
        raise ConfigError(f"unrecognized chain header in {path}: {lines[0]}")
    names = header[3:]
    try:
        body = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise ConfigError(f"malformed chain row in {path}: {exc}") from exc
    if body.shape[1] != 3 + len(names):
        raise ConfigError(f"ragged chain rows in {path}")
    return names, body[:, 3:], body[:, 1].astype(bool), body[:, 2]


def adaptive_mh(log_post, init, params: McmcParams, seed: int = 0) -> PosteriorChain:
    """Adaptive random-walk Metropolis sampling.

    For 1-based step j ≤ 2·dim the proposal increment is
    N(0, (γ1/dim)·I); afterwards it is the mixture
    (1−β)·N(0, (γ2/dim)·Σ_j) + β·N(0, (γ3/dim)·I) with Σ_j the running
    empirical covariance of all chain states so far (rank-1 updates,
    regularized by 1e−10·I before factorization). Acceptance uses the
    standard ratio min(1, exp(Δ log posterior)); non-finite proposal
    densities are treated as −inf and counted separately.
    """
    init = np.asarray(init, dtype=float).ravel()
    dim = len(init)
    lp0 = float(log_post(init))
    if not math.isfinite(lp0):
        raise ContractError("chain must start inside the posterior support")
    n = params.n_steps
    rng = np.random.default_rng(seed)

    states = np.empty((n, dim))
    accepted = np.zeros(n, dtype=bool)
    logpost = np.empty(n)
    states[0] = init
    accepted[0] = True
    logpost[0] = lp0

    # running covariance of states[0..j] (Welford rank-1 updates)
    run_mean = init.copy()
    m2 = np.zeros((dim, dim))
    count = 1

    reg = 1e-10 * np.eye(dim)
    warm_sd = math.sqrt(params.gamma1 / dim)
    iso_sd = math.sqrt(params.gamma3 / dim)
    cov_scale = params.gamma2 / dim
    n_nonfinite = 0
    current = init
    lp_cur = lp0

    for j in range(1, n):
        if j + 1 <= 2 * dim:  # 1-based step index
            u = warm_sd * rng.standard_normal(dim)
        else:
            cov = m2 / (count - 1)
            if rng.random() < params.beta:
                u = iso_sd * rng.standard_normal(dim)
            else:
                try:
                    chol = np.linalg.cholesky(cov_scale * cov + reg)
                except np.linalg.LinAlgError:
                    # adaptation broke down (overflowed or degenerate
                    # running covariance); keep walking isotropically
                    chol = warm_sd * np.eye(dim)
                u = chol @ rng.standard_normal(dim)
        prop = current + u
        lp_prop = log_post(prop)
        if not math.isfinite(lp_prop):
            n_nonfinite += 1
            lp_prop = -math.inf
        dlp = lp_prop - lp_cur
        if rng.random() < (1.0 if dlp >= 0 else math.exp(dlp)):
            current = prop
            lp_cur = lp_prop
            accepted[j] = True
        states[j] = current
        logpost[j] = lp_cur

        count += 1
        delta = current - run_mean
        run_mean += delta / count
        m2 += np.outer(delta, current - run_mean)

    return PosteriorChain(
        states=states, accepted=accepted, logpost=logpost,
        n_nonfinite=n_nonfinite, seed=seed, params=params,
    )


def postprocess_chain(states, burn_in_fraction: float = 0.5, thinning: int = 10) -> np.ndarray:
    """Discard the leading burn-in fraction, then keep every k-th state.

    Defaults reproduce the reference reduction 10⁶ → 50,000 retained.
    """
    if isinstance(states, PosteriorChain):
        states = states.states
    states = np.asarray(states)
    if not (0.0 <= burn_in_fraction < 1.0):
        raise ContractError(f"burn-in fraction must be in [0, 1), got {burn_in_fraction}")
    if thinning < 1:
        raise ContractError(f"thinning must be a positive integer, got {thinning}")
    n = len(states)
    start = int(math.floor(burn_in_fraction * n))
    kept = states[start::thinning]
    if len(kept) == 0:
        raise ContractError("post-processing retained no samples")
    return kept


def credible_interval(samples_1d, x_star: float, mass: float = 0.68) -> float:
    """Smallest radius r with at least ``mass`` of the samples in |x−x*| ≤ r."""
    x = np.asarray(samples_1d, dtype=float).ravel()
    if len(x) == 0:
        raise ContractError("credible radius needs at least one sample")
    if not (0.0 < mass < 1.0):
        raise ContractError(f"mass must lie in (0, 1), got {mass}")
    dist = np.abs(x - x_star)
    n = len(x)
    k = math.ceil(mass * n)
    if k > 1 and (k - 1) / n >= mass:  # float slop in mass*n can overshoot
        k -= 1
    return float(np.partition(dist, k - 1)[k - 1])


def _fit_gamma_mode(x: np.ndarray) -> tuple[float, float, float]:
    """Moment-matched then ML-refined gamma fit; returns (alpha, beta, mode)."""
    mean = float(x.mean())
    var = float(x.var())
    if var == 0.0 or mean <= 0.0 or np.any(x <= 0.0):
        return math.nan, math.nan, float(x[0]) if var == 0.0 else math.nan
    alpha0 = mean**2 / var
    s = math.log(mean) - float(np.mean(np.log(x)))
    if s <= 0:  # numerically constant sample
        return math.nan, math.nan, mean
    try:
        f = lambda a: math.log(a) - special.digamma(a) - s
        lo, hi = alpha0, alpha0
        while f(lo) < 0 and lo > 1e-12:
            lo /= 2.0
        while f(hi) > 0 and hi < 1e12:
            hi *= 2.0
        alpha = optimize.brentq(f, lo, hi, xtol=1e-12, rtol=1e-12)
    except ValueError:
        alpha = alpha0  # moment fallback when refinement cannot bracket
    beta = alpha / mean
    mode = (alpha - 1.0) / beta if alpha > 1.0 else 0.0
    return float(alpha), float(beta), float(mode)


def _kde_mode(x: np.ndarray, n_grid: int = 512) -> float:
    """Mode of a Gaussian KDE with the Silverman rule-of-thumb bandwidth."""
    sd = float(x.std())
    if sd == 0.0:
        return float(x[0])
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    bw = 0.9 * spread * len(x) ** (-0.2)
    grid = np.linspace(x.min(), x.max(), n_grid)
    density = np.exp(-0.5 * ((grid[:, None] - x[None, :]) / bw) ** 2).sum(axis=1)
    return float(grid[np.argmax(density)])


@dataclass(frozen=True)
class InferenceSummary:
    """Marginal point estimates and uncertainty for a retained sample set."""

    names: tuple
    mode: np.ndarray          # per-coordinate marginal mode (the point estimate)
    mean: np.ndarray          # conditional mean
    radius68: np.ndarray      # credible-ball radius per coordinate
    ci_low: np.ndarray        # mode − radius, clipped to the support
    ci_high: np.ndarray       # mode + radius, clipped to the support
    covariance: np.ndarray    # sample covariance about the mode vector
    gamma_fits: dict = field(default_factory=dict)   # name -> (alpha, beta)

    def to_json_dict(self) -> dict:
        return {
            "names": list(self.names),
            "mode": [float(v) for v in self.mode],
            "mean": [float(v) for v in self.mean],
            "radius68": [float(v) for v in self.radius68],
            "ci_low": [float(v) for v in self.ci_low],
            "ci_high": [float(v) for v in self.ci_high],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "gamma_fits": {k: [float(a), float(b)] for k, (a, b) in self.gamma_fits.items()},
        }


def point_estimates(
    samples: np.ndarray,
    names,
    *,
    n_theta: int,
    support=None,
    mass: float = 0.68,
) -> InferenceSummary:
    """Summarize retained samples: modes, mean, credible radii, covariance.

    The first ``n_theta`` coordinates take their marginal mode from a
    Gaussian-kernel density estimate; the remaining (rate) coordinates
    from a moment-matched, ML-refined gamma fit, falling back to the KDE
    mode if a gamma fit is impossible. ``support`` is an optional
    (dim, 2) array of bounds used only to clip the reported interval
    endpoints; use ±inf for unbounded axes.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    m, dim = samples.shape
    names = tuple(names)
    if len(names) != dim:
        raise ContractError("names must match the sample dimension")
    if m < 1000:
        raise ContractError(f"need at least 1000 samples for estimates, got {m}")
    if not 0 <= n_theta <= dim:
        raise ContractError("n_theta out of range")
    if support is None:
        support = np.column_stack([np.full(dim, -np.inf), np.full(dim, np.inf)])
    support = np.asarray(support, dtype=float).reshape(dim, 2)

    mode = np.empty(dim)
    gamma_fits = {}
    for i in range(dim):
        x = samples[:, i]
        if i < n_theta:
            mode[i] = _kde_mode(x)
        else:
            a, b, mo = _fit_gamma_mode(x)
            if math.isnan(mo):
                mode[i] = _kde_mode(x)
            else:
                mode[i] = mo
                if not math.isnan(a):
                    gamma_fits[names[i]] = (a, b)

    mean = samples.mean(axis=0)
    radius = np.array([
        credible_interval(samples[:, i], mode[i], mass) for i in range(dim)
    ])
    centred = samples - mode
    covariance = centred.T @ centred / m
    return InferenceSummary(
        names=names,
        mode=mode,
        mean=mean,
        radius68=radius,
        ci_low=np.maximum(mode - radius, support[:, 0]),
        ci_high=np.minimum(mode + radius, support[:, 1]),
        covariance=covariance,
        gamma_fits=gamma_fits,
    )
