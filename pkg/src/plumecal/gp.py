"""Gaussian-process emulation of expensive scalar maps.

One emulator interpolates a scalar function of the model parameters from
K design evaluations: a constant prior mean (the training average), an
isotropic covariance kernel on inputs affinely scaled to [0,1]^m, and
exact conditioning through a jittered Cholesky factorization.

Four kernel families are supported (s = Euclidean distance between the
scaled inputs):

    exponential          r1 * exp(-s / r2)
    squared_exponential  r1 * exp(-s^2 / (2 r2))      (r2 is the squared scale)
    matern32             r1 * (1 + sqrt(3) s / r2) * exp(-sqrt(3) s / r2)
    matern52             r1 * (1 + sqrt(5) s / r2 + 5 s^2 / (3 r2^2))
                            * exp(-sqrt(5) s / r2)

Hyperparameters maximize the log marginal likelihood over a fixed log10
grid (r1 relative to the training variance, r2 absolute on the scaled
inputs) refined by three rounds of coordinate descent, so a fit is a
pure function of its inputs. A whole matrix of maps shares one design;
:func:`emulate_matrix` fits every entry and serves clamped nonnegative
matrix predictions.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import ConfigError, ContractError, NumericsError

logger = logging.getLogger(__name__)

KERNEL_FAMILIES = ("exponential", "squared_exponential", "matern32", "matern52")

#: jitter ladder, as multiples of r1
_JITTER_START = 1e-10
_JITTER_MAX = 1e-4

_R1_LOG_GRID = np.linspace(-6.0, 2.0, 25)
_R2_LOG_GRID = np.linspace(-3.0, 1.0, 25)


class OutOfBoxWarning(UserWarning):
    """Prediction requested outside the emulator's parameter box."""


def kernel_value(family: str, s, r1: float, r2: float):
    """Evaluate the kernel at distance(s) ``s``; kernel_value(family, 0) == r1."""
    if family not in KERNEL_FAMILIES:
        raise ContractError(f"unknown kernel family {family!r}")
    if r1 < 0 or r2 <= 0:
        raise ContractError(f"need r1 >= 0 and r2 > 0, got r1={r1}, r2={r2}")
    s = np.asarray(s, dtype=float)
    if family == "exponential":
        out = r1 * np.exp(-s / r2)
    elif family == "squared_exponential":
        out = r1 * np.exp(-(s**2) / (2.0 * r2))
    elif family == "matern32":
        t = math.sqrt(3.0) * s / r2
        out = r1 * (1.0 + t) * np.exp(-t)
    else:  # matern52
        t = math.sqrt(5.0) * s / r2
        out = r1 * (1.0 + t + t**2 / 3.0) * np.exp(-t)
    return out if out.ndim else float(out)


def _pairwise_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def kernel_matrix(family: str, X: np.ndarray, Y: np.ndarray, r1: float, r2: float) -> np.ndarray:
    return kernel_value(family, _pairwise_distances(X, Y), r1, r2)


def _scale_inputs(points: np.ndarray, ranges: np.ndarray) -> np.ndarray:
    lo, hi = ranges[:, 0], ranges[:, 1]
    return (np.asarray(points, dtype=float) - lo) / (hi - lo)


def _chol_with_jitter(S: np.ndarray, family: str, r1: float, r2: float):
    """Cholesky of the Gram matrix, escalating jitter tenfold on failure.

    Returns (L, jitter) or (None, None) when even the maximum jitter
    cannot make the matrix positive definite.
    """
    K = kernel_value(family, S, r1, r2)
    jitter = _JITTER_START * r1
    eye = np.eye(len(S))
    while jitter <= _JITTER_MAX * r1 * (1 + 1e-12):
        try:
            L = cholesky(K + jitter * eye, lower=True, check_finite=False)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    return None, None


def _log_marginal_likelihood(S, g_centred, family, r1, r2):
    if r1 <= 0:
        return -np.inf
    L, _ = _chol_with_jitter(S, family, r1, r2)
    if L is None:
        return -np.inf
    alpha = cho_solve((L, True), g_centred, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    n = len(g_centred)
    return float(-0.5 * g_centred @ alpha - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi))


@dataclass
class GaussianProcessEmulator:
    """A fitted emulator; construct through :func:`fit`."""

    family: str
    r1: float
    r2: float
    jitter: float
    mean_const: float
    ranges: np.ndarray          # (m, 2) physical bounds for input scaling
    design_unit: np.ndarray     # (K, m) scaled training inputs
    values: np.ndarray          # (K,) training targets
    _L: np.ndarray = field(repr=False, default=None)
    _alpha: np.ndarray = field(repr=False, default=None)

    @property
    def degenerate(self) -> bool:
        return self.r1 == 0.0

    def _prepare(self):
        if self.degenerate or self._L is not None:
            return
        S = _pairwise_distances(self.design_unit, self.design_unit)
        K = kernel_value(self.family, S, self.r1, self.r2)
        self._L = cholesky(
            K + self.jitter * np.eye(len(S)), lower=True, check_finite=False
        )
        self._alpha = cho_solve((self._L, True), self.values - self.mean_const, check_finite=False)

    def _check_box(self, unit_pts: np.ndarray):
        if np.any(unit_pts < -1e-9) or np.any(unit_pts > 1 + 1e-9):
            warnings.warn(
                "prediction outside the emulator's parameter box", OutOfBoxWarning,
                stacklevel=3,
            )

    def predict(self, theta) -> tuple[float, float]:
        """Predictive mean and variance at one physical parameter vector."""
        mean, var = self.predict_many(np.atleast_2d(np.asarray(theta, dtype=float)))
        return float(mean[0]), float(var[0])

    def predict_many(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized prediction at rows of ``thetas`` (physical units)."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        u = _scale_inputs(thetas, self.ranges)
        self._check_box(u)
        if self.degenerate:
            n = len(u)
            return np.full(n, self.mean_const), np.zeros(n)
        self._prepare()
        Kxs = kernel_matrix(self.family, u, self.design_unit, self.r1, self.r2)
        mean = self.mean_const + Kxs @ self._alpha
        V = solve_triangular(self._L, Kxs.T, lower=True, check_finite=False)
        var = self.r1 - np.einsum("ij,ij->j", V, V)
        bad = var < -1e-10 * max(self.r1, 1.0)
        if np.any(bad):
            raise NumericsError(
                f"predictive variance {var[bad].min():g} below the clamping tolerance"
            )
        return mean, np.maximum(var, 0.0)


def fit(
    design: np.ndarray,
    values: np.ndarray,
    family: str = "squared_exponential",
    *,
    ranges=None,
    seed: int = 0,
    fixed: tuple | None = None,
) -> GaussianProcessEmulator:
    """Fit one emulator to ``values`` observed at ``design`` points.

    Parameters
    ----------
    design : ndarray, shape (K, m)
        Training inputs in physical units.
    values : ndarray, shape (K,)
        Training targets.
    family : str
        Kernel family name.
    ranges : array-like, shape (m, 2), optional
        Physical box used to scale inputs onto [0,1]^m. Defaults to the
        unit box (inputs taken as already scaled).
    seed : int
        Accepted for interface stability; the fit is deterministic
        (grid + coordinate descent), so it is unused.
    fixed : (r1, r2), optional
        Skip hyperparameter optimization and condition with these values.

    Raises
    ------
    NumericsError
        If no admissible hyperparameters give a positive-definite Gram
        matrix, or interpolation quality is irreparably poor.
    """
    del seed
    design = np.atleast_2d(np.asarray(design, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    K, m = design.shape
    if len(values) != K:
        raise ContractError(f"{K} design points but {len(values)} values")
    if K < 2:
        raise ContractError("need at least two design points")
    if not np.all(np.isfinite(design)) or not np.all(np.isfinite(values)):
        raise ContractError("design and values must be finite")
    if family not in KERNEL_FAMILIES:
        raise ContractError(f"unknown kernel family {family!r}")
    if ranges is None:
        ranges = np.column_stack([np.zeros(m), np.ones(m)])
    ranges = np.asarray(ranges, dtype=float).reshape(m, 2)
    if np.any(ranges[:, 1] <= ranges[:, 0]):
        raise ContractError("input-scaling ranges must have positive width")

    X = _scale_inputs(design, ranges)
    mean_const = float(values.mean())
    g = values - mean_const
    var_g = float(np.mean(g**2))

    if fixed is not None:
        r1, r2 = float(fixed[0]), float(fixed[1])
    elif var_g == 0.0:
        # constant training values: degenerate emulator that returns the
        # constant with zero variance everywhere
        return GaussianProcessEmulator(
            family=family, r1=0.0, r2=1.0, jitter=0.0, mean_const=mean_const,
            ranges=ranges, design_unit=X, values=values,
        )
    else:
        S = _pairwise_distances(X, X)

        def objective(lr1, lr2):
            return _log_marginal_likelihood(S, g, family, var_g * 10.0**lr1, 10.0**lr2)

        scores = np.array([[objective(a, b) for b in _R2_LOG_GRID] for a in _R1_LOG_GRID])
        if not np.any(np.isfinite(scores)):
            raise NumericsError(
                f"no hyperparameter candidate gave a positive-definite Gram matrix "
                f"(family={family}, K={K}, max jitter {_JITTER_MAX:g}*r1)"
            )
        i, j = np.unravel_index(np.argmax(scores), scores.shape)
        lr1, lr2 = _R1_LOG_GRID[i], _R2_LOG_GRID[j]
        best = scores[i, j]
        step1 = float(_R1_LOG_GRID[1] - _R1_LOG_GRID[0])
        step2 = float(_R2_LOG_GRID[1] - _R2_LOG_GRID[0])
        for _ in range(3):
            for c1 in (lr1 - step1, lr1 + step1):
                val = objective(c1, lr2)
                if val > best:
                    best, lr1 = val, c1
            for c2 in (lr2 - step2, lr2 + step2):
                val = objective(lr1, c2)
                if val > best:
                    best, lr2 = val, c2
            step1 *= 0.5
            step2 *= 0.5
        r1, r2 = var_g * 10.0**lr1, 10.0**lr2

    S = _pairwise_distances(X, X)
    scale = float(np.max(np.abs(g))) or 1.0
    while True:
        L, jitter = _chol_with_jitter(S, family, r1, r2)
        if L is not None:
            alpha = cho_solve((L, True), g, check_finite=False)
            Kmat = kernel_value(family, S, r1, r2)
            worst = float(np.max(np.abs(Kmat @ alpha - g)))
            if worst <= 1e-8 * scale and jitter <= 1.1e-8 * r1:
                break
        if fixed is not None or r2 <= 10.0 ** _R2_LOG_GRID[0]:
            if L is None:
                raise NumericsError(
                    f"Gram matrix not positive definite at maximum jitter "
                    f"(family={family}, r1={r1:g}, r2={r2:g}, K={K})"
                )
            break  # accept what we have for user-fixed hyperparameters
        # shorter correlation length restores interpolation accuracy
        r2 *= 0.5

    emu = GaussianProcessEmulator(
        family=family, r1=r1, r2=r2, jitter=jitter, mean_const=mean_const,
        ranges=ranges, design_unit=X, values=values,
    )
    emu._L = L
    emu._alpha = alpha
    return emu


@dataclass(frozen=True)
class LoocvRecord:
    index: int
    true_value: float
    predicted_mean: float
    predicted_sd: float
    ok: bool


def loocv(design, values, family="squared_exponential", *, ranges=None) -> list[LoocvRecord]:
    """Leave-one-out cross validation: K refits on K-1 points each.

    Fit failures are flagged (ok=False) rather than raised, so one bad
    leave-out cannot sink a whole validation run.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    values = np.asarray(values, dtype=float).ravel()
    K = len(values)
    if K < 3:
        raise ContractError("leave-one-out validation needs at least 3 points")
    records = []
    for k in range(K):
        keep = np.arange(K) != k
        try:
            emu = fit(design[keep], values[keep], family, ranges=ranges)
            mean, var = emu.predict(design[k])
            records.append(LoocvRecord(k, float(values[k]), mean, math.sqrt(max(var, 0.0)), True))
        except NumericsError:
            records.append(LoocvRecord(k, float(values[k]), math.nan, math.nan, False))
    return records


def r_squared(records: list[LoocvRecord]) -> float:
    """Coefficient of determination over the successful LOOCV records."""
    good = [r for r in records if r.ok]
    if not good:
        return float("nan")
    y = np.array([r.true_value for r in good])
    yhat = np.array([r.predicted_mean for r in good])
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else float("-inf")
    return 1.0 - ss_res / ss_tot


class _NearestNeighbor:
    """Fallback lookup used when a GP fit fails outright."""

    def __init__(self, design_unit: np.ndarray, values: np.ndarray):
        self.design_unit = design_unit
        self.values = values

    def predict_unit(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = _pairwise_distances(u, self.design_unit)
        idx = np.argmin(d, axis=1)
        return self.values[idx], np.zeros(len(u))


def _grouped_kernel(family: str, s: np.ndarray, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Kernel column per emulator: s (K,), r1/r2 (G,) -> (K, G)."""
    if family == "squared_exponential":
        return r1 * np.exp(-0.5 * s[:, None] ** 2 / r2[None, :])
    t = s[:, None] / r2[None, :]
    if family == "exponential":
        return r1 * np.exp(-t)
    if family == "matern32":
        u = math.sqrt(3.0) * t
        return r1 * (1.0 + u) * np.exp(-u)
    u = math.sqrt(5.0) * t
    return r1 * (1.0 + u + u * u / 3.0) * np.exp(-u)


@dataclass
class EmulatedMatrix:
    """Per-entry emulation of a (d x n) parameter-dependent matrix.

    All entries share one design; each has its own emulator (or a
    nearest-neighbour fallback where fitting failed — ``fallbacks``
    lists those, and they trigger a warning at build time).
    """

    shape: tuple[int, int]
    ranges: np.ndarray
    design_unit: np.ndarray
    emulators: list
    fallbacks: tuple = ()
    _fast: tuple = field(default=None, repr=False, compare=False)

    def _build_fast(self):
        """Group GP entries by kernel family so one distance vector and a
        handful of vectorized kernel evaluations serve all d*n means."""
        by_family: dict[str, list[int]] = {}
        consts = []
        nn = []
        for pos, emu in enumerate(self.emulators):
            if isinstance(emu, _NearestNeighbor):
                nn.append((pos, emu))
            elif emu.degenerate:
                consts.append((pos, emu.mean_const))
            else:
                emu._prepare()
                by_family.setdefault(emu.family, []).append(pos)
        packed = []
        for family, positions in by_family.items():
            es = [self.emulators[p] for p in positions]
            packed.append((
                family,
                np.array(positions),
                np.array([e.r1 for e in es]),
                np.array([e.r2 for e in es]),
                np.array([e.mean_const for e in es]),
                np.column_stack([e._alpha for e in es]),
            ))
        self._fast = (packed, consts, nn)

    def predict(self, theta, *, with_variance: bool = False):
        """Nonnegative matrix prediction at one parameter vector.

        Negative predictive means are clamped to zero (the maps are
        deposition masses); clamping is logged at debug level.
        """
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        d, n = self.shape
        if self._fast is None:
            self._build_fast()
        packed, consts, nn = self._fast
        u = _scale_inputs(theta, self.ranges)
        if np.any(u < -1e-9) or np.any(u > 1 + 1e-9):
            warnings.warn(
                "prediction outside the emulator's parameter box", OutOfBoxWarning,
                stacklevel=2,
            )
        diff = self.design_unit - u[0]
        s = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        means = np.empty(d * n)
        for family, positions, r1, r2, mean_c, alphas in packed:
            cols = _grouped_kernel(family, s, r1, r2)
            means[positions] = mean_c + np.einsum("kg,kg->g", cols, alphas)
        for pos, c in consts:
            means[pos] = c
        for pos, emu in nn:
            means[pos] = emu.predict_unit(u)[0][0]
        neg = means < 0
        if np.any(neg):
            logger.debug(
                "clamped %d negative matrix entries (largest magnitude %g)",
                int(neg.sum()), float(-means[neg].min()),
            )
        out = np.maximum(means, 0.0).reshape(d, n)
        if not with_variance:
            return out
        varis = np.empty(d * n)
        for pos, emu in enumerate(self.emulators):
            if isinstance(emu, _NearestNeighbor):
                varis[pos] = 0.0
            else:
                varis[pos] = emu.predict_many(theta)[1][0]
        return out, varis.reshape(d, n)

    def entry(self, row: int, col: int):
        return self.emulators[row * self.shape[1] + col]


def emulate_matrix(
    design: np.ndarray,
    snapshots: np.ndarray,
    family: str = "squared_exponential",
    *,
    ranges=None,
    seed: int = 0,
) -> EmulatedMatrix:
    """Fit one emulator per matrix entry from design-point snapshots.

    Parameters
    ----------
    design : (K, m) physical design points.
    snapshots : (K, d, n) matrix evaluated at each design point.
    """
    design = np.atleast_2d(np.asarray(design, dtype=float))
    snapshots = np.asarray(snapshots, dtype=float)
    if snapshots.ndim != 3 or snapshots.shape[0] != design.shape[0]:
        raise ContractError(
            f"snapshots must be (K, d, n) aligned with the design, got {snapshots.shape}"
        )
    K, d, n = snapshots.shape
    emulators = []
    fallbacks = []
    ref = None
    for i in range(d):
        for j in range(n):
            try:
                emu = fit(design, snapshots[:, i, j], family, ranges=ranges, seed=seed)
                emulators.append(emu)
                ref = emu
            except NumericsError as exc:
                warnings.warn(
                    f"entry ({i},{j}) fell back to nearest-neighbour lookup: {exc}",
                    stacklevel=2,
                )
                fallbacks.append((i, j))
                emulators.append(None)  # filled below once scaling is known
    if ref is None:
        raise NumericsError("every matrix entry failed to fit")
    for pos, emu in enumerate(emulators):
        if emu is None:
            i, j = divmod(pos, n)
            emulators[pos] = _NearestNeighbor(ref.design_unit, snapshots[:, i, j])
    em = EmulatedMatrix(
        shape=(d, n),
        ranges=ref.ranges,
        design_unit=ref.design_unit,
        emulators=emulators,
        fallbacks=tuple(fallbacks),
    )
    em._build_fast()
    return em


# ---------------------------------------------------------------------------
# persistence (hexadecimal floats for bit-exact reload)

def _hex_arr(a) -> list:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return [float(v).hex() for v in a]
    return [_hex_arr(row) for row in a]


def _unhex_arr(rows) -> np.ndarray:
    if rows and isinstance(rows[0], list):
        return np.array([[float.fromhex(v) for v in row] for row in rows])
    return np.array([float.fromhex(v) for v in rows])


def save_emulated_matrix(em: EmulatedMatrix, path) -> None:
    d, n = em.shape
    entries = []
    for pos, emu in enumerate(em.emulators):
        i, j = divmod(pos, n)
        if isinstance(emu, _NearestNeighbor):
            entries.append({"row": i, "col": j, "kind": "nearest",
                            "values": _hex_arr(emu.values)})
        else:
            entries.append({
                "row": i, "col": j, "kind": "gp",
                "family": emu.family,
                "r1": float(emu.r1).hex(),
                "r2": float(emu.r2).hex(),
                "jitter": float(emu.jitter).hex(),
                "mean": float(emu.mean_const).hex(),
                "values": _hex_arr(emu.values),
            })
    doc = {
        "shape": [d, n],
        "ranges": _hex_arr(em.ranges),
        "design_unit": _hex_arr(em.design_unit),
        "entries": entries,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_emulated_matrix(path) -> EmulatedMatrix:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"emulator store not found: {path}")
    try:
        doc = json.loads(path.read_text())
        d, n = doc["shape"]
        ranges = _unhex_arr(doc["ranges"])
        design_unit = _unhex_arr(doc["design_unit"])
        emulators = [None] * (d * n)
        fallbacks = []
        for e in doc["entries"]:
            pos = e["row"] * n + e["col"]
            values = _unhex_arr(e["values"])
            if e["kind"] == "nearest":
                emulators[pos] = _NearestNeighbor(design_unit, values)
                fallbacks.append((e["row"], e["col"]))
            else:
                emulators[pos] = GaussianProcessEmulator(
                    family=e["family"],
                    r1=float.fromhex(e["r1"]),
                    r2=float.fromhex(e["r2"]),
                    jitter=float.fromhex(e["jitter"]),
                    mean_const=float.fromhex(e["mean"]),
                    ranges=ranges,
                    design_unit=design_unit,
                    values=values,
                )
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"malformed emulator store {path}: {exc}") from exc
    if any(e is None for e in emulators):
        raise ConfigError(f"emulator store {path} is missing entries")
    em = EmulatedMatrix(
        shape=(d, n), ranges=ranges, design_unit=design_unit,
        emulators=emulators, fallbacks=tuple(fallbacks),
    )
    em._build_fast()
    return em
