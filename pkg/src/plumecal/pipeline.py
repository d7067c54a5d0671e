"""Staged calibration pipeline: configuration, artifacts, and studies.

Each stage function (``cmd_design``, ``cmd_snapshot``, ...) reads its
inputs from files under one output directory and writes its products
back there, so every step can be inspected, diffed, and resumed; the
command-line front end in :mod:`plumecal.cli` maps subcommands onto the
stage functions one to one.

Artifact layout (all under ``config.out_dir``)::

    design.csv / design.json      scored design (unit coords in the JSON)
    snapshots/                    per-design-point response matrices
        index.json                hex-float bundle used for training
        point_000.csv ...         human-readable per-point matrices
    emulator.json                 fitted matrix emulator
    loocv.csv / validation.json   leave-one-out diagnostics
    sensitivity.csv / .json       screening indices and verdict
    data.csv / data.json          measurements (+ generator metadata)
    noise.csv / noise.json        J(lambda) sweep and selected variance
    chain.csv / summary.json      retained posterior samples + estimates
    study_prior.csv / .json       prior-spread comparison
    study_emulator.json           design-size convergence comparison
    report.md                     human-readable roll-up

Units: artifact files store depositions in micrograms and emission
rates in tonnes per year (jar-scale and annual-reporting scales). The
solver's kg-per-(kg/s) response is converted exactly once, when
snapshots or synthetic measurements are produced; everything downstream
works in data units.

File formats: TOML for configuration, CSV for tabular data, JSON for
summaries. Where bit-exact reload matters (training inputs, design
coordinates) floats are serialized in C99 hexadecimal form.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 backport
    import tomli as tomllib

from . import bayes, doe, gp, noise_cal, sensitivity
from .errors import ConfigError, ContractError
from .forward import ModelParams, ParameterBox
from .forward import deposition as depo
from .forward import site as site_mod
from .forward.params import DEFAULT_RANGES
from .gp import _hex_arr, _unhex_arr
from .seeds import child_seed

# Unit conversions. A tonne/year is expressed in kg/s with the Julian
# year (365.25 d); depositions are reported in micrograms.
SECONDS_PER_YEAR = 31_557_600.0
RATE_UG_PER_TONYR = 1e9 * 1000.0 / SECONDS_PER_YEAR

DESIGN_CSV = "design.csv"
DESIGN_JSON = "design.json"
SNAPSHOT_DIR = "snapshots"
SNAPSHOT_INDEX = "index.json"
EMULATOR_JSON = "emulator.json"
LOOCV_CSV = "loocv.csv"
VALIDATION_JSON = "validation.json"
SENSITIVITY_CSV = "sensitivity.csv"
SENSITIVITY_JSON = "sensitivity.json"
DATA_CSV = "data.csv"
DATA_JSON = "data.json"
NOISE_CSV = "noise.csv"
NOISE_JSON = "noise.json"
CHAIN_CSV = "chain.csv"
SUMMARY_JSON = "summary.json"
STUDY_PRIOR_CSV = "study_prior.csv"
STUDY_PRIOR_JSON = "study_prior.json"
STUDY_EMULATOR_JSON = "study_emulator.json"
REPORT_MD = "report.md"

_SECTION_KEYS = {
    "site": {"file", "grid", "wind_file", "wind_bins"},
    "ranges": {"p", "z0", "L"},
    "design": {"k", "iterations", "swarm_size"},
    "emulator": {"kernel"},
    "prior": {"tau", "q_eng"},
    "mcmc": {"n_steps", "beta", "gamma1", "gamma2", "gamma3"},
    "noise": {"candidates", "chain_steps", "fixed"},
    "data": {"file"},
    "synthetic": {"theta_true", "q_true", "lambda_true", "snr"},
    "sensitivity": {"k", "iterations", "n_base", "grid", "wind_bins",
                    "z_i", "z_cut", "threshold"},
    "study": {"taus", "k_values", "n_steps"},
    "pipeline": {"seed", "out", "jobs"},
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run needs, resolved and validated.

    Loaded from a TOML file via :meth:`from_toml`; the ``--seed``,
    ``--out`` and ``--jobs`` command-line flags override their config
    counterparts. Paths inside the config file are resolved relative to
    the file itself. The random seed must be explicit — there is no
    wall-clock fallback — so that any run can be reproduced bit for bit.
    """

    seed: int
    out_dir: Path
    site_file: Path | None = None
    site_grid: tuple = (24, 24, 24)
    wind_file: Path | None = None
    wind_bins: int = 16
    ranges: tuple = tuple(DEFAULT_RANGES[n] for n in ("p", "z0", "L"))
    design_k: int = 64
    design_iterations: int = 2000
    swarm_size: int = 30
    kernel: str = "squared_exponential"
    tau: float = 3.0
    q_eng: tuple = (35.0, 80.0, 5.0, 5.0)
    mcmc_n_steps: int = 1_000_000
    mcmc_beta: float = 0.05
    mcmc_gamma1: float = 0.01
    mcmc_gamma2: float = 2.38**2
    mcmc_gamma3: float = 0.1**2
    noise_candidates: tuple | None = None
    noise_chain_steps: int = 100_000
    lambda_fixed: float | None = None
    data_file: Path | None = None
    synthetic_theta: tuple | None = None
    synthetic_q: tuple | None = None
    synthetic_lambda: float | None = None
    synthetic_snr: float | None = None
    sens_k: int = 40
    sens_iterations: int = 300
    sens_n_base: int = 2048
    sens_grid: tuple = (12, 12, 12)
    sens_wind_bins: int = 4
    sens_zi: tuple = (50.0, 500.0)
    sens_zcut: tuple = (0.5, 5.0)
    sens_threshold: float = 0.1
    study_taus: tuple = (2.0, 3.0, 4.0)
    study_k_values: tuple = (16, 32, 64)
    study_n_steps: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if self.design_k < 8:
            raise ConfigError(f"design.k must be at least 8 for emulation, got {self.design_k}")
        if self.sens_k < 8:
            raise ConfigError(f"sensitivity.k must be at least 8, got {self.sens_k}")
        if self.kernel not in gp.KERNEL_FAMILIES:
            raise ConfigError(f"unknown kernel family {self.kernel!r}; "
                              f"choose one of {gp.KERNEL_FAMILIES}")
        if not self.tau > 1.0:
            raise ConfigError(f"prior.tau must exceed 1, got {self.tau}")
        if len(self.q_eng) == 0 or any(not q > 0 for q in self.q_eng):
            raise ConfigError(f"prior.q_eng must be positive rates, got {self.q_eng}")
        if self.wind_bins < 1 or self.sens_wind_bins < 1:
            raise ConfigError("wind_bins must be at least 1")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")
        for label, grid in (("site.grid", self.site_grid), ("sensitivity.grid", self.sens_grid)):
            if len(grid) != 3 or any(int(g) < 2 for g in grid):
                raise ConfigError(f"{label} must be three cell counts >= 2, got {grid}")
        for label, path in (("site.file", self.site_file),
                            ("site.wind_file", self.wind_file),
                            ("data.file", self.data_file)):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{label} does not exist: {path}")
        names = ("p", "z0", "L")
        admissible = {"p": (0.0, 0.6), "z0": (0.0, 3.0), "L": (-600.0, 0.0)}
        for name, (lo, hi) in zip(names, self.ranges):
            alo, ahi = admissible[name]
            if not (lo < hi and lo >= alo and hi <= ahi):
                raise ConfigError(
                    f"range for {name} must be a nonempty interval inside "
                    f"[{alo}, {ahi}], got [{lo}, {hi}]")
        if self.ranges[1][0] <= 0.0 or self.ranges[2][1] >= 0.0:
            raise ConfigError("z0 range must be positive and L range negative "
                              "(both closures are singular at zero)")
        try:
            self.mcmc_params()
        except ContractError as exc:
            raise ConfigError(f"invalid [mcmc] section: {exc}") from exc
        if self.study_n_steps is not None and self.study_n_steps < 100:
            raise ConfigError("study.n_steps must be at least 100")
        if self.noise_chain_steps < 100:
            raise ConfigError("noise.chain_steps must be at least 100")
        if self.lambda_fixed is not None and not self.lambda_fixed > 0:
            raise ConfigError(f"noise.fixed must be positive, got {self.lambda_fixed}")
        if self.noise_candidates is not None and any(
                not c > 0 for c in self.noise_candidates):
            raise ConfigError("noise.candidates must all be positive")
        if self.synthetic_lambda is not None and self.synthetic_lambda < 0:
            raise ConfigError(f"synthetic.lambda_true must be >= 0, got {self.synthetic_lambda}")
        if self.synthetic_snr is not None and not self.synthetic_snr > 0:
            raise ConfigError(f"synthetic.snr must be positive, got {self.synthetic_snr}")
        if self.synthetic_lambda is not None and self.synthetic_snr is not None:
            raise ConfigError("give synthetic.lambda_true or synthetic.snr, not both")
        if len(set(self.study_taus)) < 2 or any(not t > 1 for t in self.study_taus):
            raise ConfigError(f"study.taus needs >= 2 distinct values > 1, got {self.study_taus}")
        if (len(self.study_k_values) < 2
                or any(k < 8 for k in self.study_k_values)
                or list(self.study_k_values) != sorted(set(self.study_k_values))):
            raise ConfigError("study.k_values must be >= 2 strictly increasing sizes, "
                              f"each >= 8, got {self.study_k_values}")

    @classmethod
    def from_toml(cls, path, *, seed=None, out=None, jobs=None) -> "PipelineConfig":
        """Load and validate a config file, applying CLI overrides."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = tomllib.loads(path.read_text())
        except Exception as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section, table in doc.items():
            if section not in _SECTION_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
            if not isinstance(table, dict):
                raise ConfigError(f"[{section}] must be a table")
            unknown = set(table) - _SECTION_KEYS[section]
            if unknown:
                raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{section}]")

        base = path.parent

        def resolve(p):
            return None if p is None else (base / p)

        def sec(name):
            return doc.get(name, {})

        kwargs = {}
        site = sec("site")
        kwargs["site_file"] = resolve(site.get("file"))
        if "grid" in site:
            kwargs["site_grid"] = tuple(int(g) for g in site["grid"])
        kwargs["wind_file"] = resolve(site.get("wind_file"))
        if "wind_bins" in site:
            kwargs["wind_bins"] = int(site["wind_bins"])
        if "ranges" in doc:
            rng = dict(DEFAULT_RANGES)
            for name, pair in doc["ranges"].items():
                if len(pair) != 2:
                    raise ConfigError(f"ranges.{name} must be [low, high]")
                rng[name] = (float(pair[0]), float(pair[1]))
            kwargs["ranges"] = tuple(rng[n] for n in ("p", "z0", "L"))
        design = sec("design")
        if "k" in design:
            kwargs["design_k"] = int(design["k"])
        if "iterations" in design:
            kwargs["design_iterations"] = int(design["iterations"])
        if "swarm_size" in design:
            kwargs["swarm_size"] = int(design["swarm_size"])
        if "kernel" in sec("emulator"):
            kwargs["kernel"] = str(doc["emulator"]["kernel"])
        prior = sec("prior")
        if "tau" in prior:
            kwargs["tau"] = float(prior["tau"])
        if "q_eng" in prior:
            kwargs["q_eng"] = tuple(float(q) for q in prior["q_eng"])
        mc = sec("mcmc")
        for key in ("n_steps",):
            if key in mc:
                kwargs["mcmc_n_steps"] = int(mc[key])
        for key in ("beta", "gamma1", "gamma2", "gamma3"):
            if key in mc:
                kwargs[f"mcmc_{key}"] = float(mc[key])
        noise = sec("noise")
        if "candidates" in noise:
            kwargs["noise_candidates"] = tuple(float(c) for c in noise["candidates"])
        if "chain_steps" in noise:
            kwargs["noise_chain_steps"] = int(noise["chain_steps"])
        if "fixed" in noise:
            kwargs["lambda_fixed"] = float(noise["fixed"])
        kwargs["data_file"] = resolve(sec("data").get("file"))
        synth = sec("synthetic")
        if "theta_true" in synth:
            kwargs["synthetic_theta"] = tuple(float(v) for v in synth["theta_true"])
        if "q_true" in synth:
            kwargs["synthetic_q"] = tuple(float(v) for v in synth["q_true"])
        if "lambda_true" in synth:
            kwargs["synthetic_lambda"] = float(synth["lambda_true"])
        if "snr" in synth:
            kwargs["synthetic_snr"] = float(synth["snr"])
        sens = sec("sensitivity")
        if "k" in sens:
            kwargs["sens_k"] = int(sens["k"])
        if "iterations" in sens:
            kwargs["sens_iterations"] = int(sens["iterations"])
        if "n_base" in sens:
            kwargs["sens_n_base"] = int(sens["n_base"])
        if "grid" in sens:
            kwargs["sens_grid"] = tuple(int(g) for g in sens["grid"])
        if "wind_bins" in sens:
            kwargs["sens_wind_bins"] = int(sens["wind_bins"])
        if "z_i" in sens:
            kwargs["sens_zi"] = tuple(float(v) for v in sens["z_i"])
        if "z_cut" in sens:
            kwargs["sens_zcut"] = tuple(float(v) for v in sens["z_cut"])
        if "threshold" in sens:
            kwargs["sens_threshold"] = float(sens["threshold"])
        study = sec("study")
        if "taus" in study:
            kwargs["study_taus"] = tuple(float(t) for t in study["taus"])
        if "k_values" in study:
            kwargs["study_k_values"] = tuple(int(k) for k in study["k_values"])
        if "n_steps" in study:
            kwargs["study_n_steps"] = int(study["n_steps"])
        pipe = sec("pipeline")
        if seed is None:
            seed = pipe.get("seed")
        if seed is None:
            raise ConfigError("a seed is required: set [pipeline] seed or pass --seed")
        if out is None:
            out = resolve(pipe.get("out"))
        if out is None:
            raise ConfigError("an output directory is required: set [pipeline] out or pass --out")
        if jobs is None:
            jobs = pipe.get("jobs", 1)
        return cls(seed=int(seed), out_dir=Path(out), jobs=int(jobs), **kwargs)

    def box(self) -> ParameterBox:
        return ParameterBox(names=("p", "z0", "L"), ranges=self.ranges)

    def mcmc_params(self, n_steps: int | None = None) -> bayes.McmcParams:
        return bayes.McmcParams(
            n_steps=int(n_steps if n_steps is not None else self.mcmc_n_steps),
            beta=self.mcmc_beta,
            gamma1=self.mcmc_gamma1,
            gamma2=self.mcmc_gamma2,
            gamma3=self.mcmc_gamma3,
        )


def _write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _read_json(path: Path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} not found: {path} (run the producing stage first)")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON: {path}: {exc}") from exc


def load_site_and_wind(config: PipelineConfig):
    """Site geometry and wind record, from files or the built-in demo."""
    if config.site_file is not None:
        site = site_mod.load_site_toml(config.site_file)
    else:
        site = site_mod.trail_like_site(grid=tuple(config.site_grid))
    if config.wind_file is not None:
        wind = site_mod.load_wind_csv(config.wind_file)
    else:
        wind = site_mod.trail_like_wind()
    return site, wind


# ---------------------------------------------------------------------------
# design / snapshot / train / validate


def cmd_design(config: PipelineConfig) -> dict:
    """Produce the space-filling design for the emulator training runs."""
    box = config.box()
    design = doe.particle_swarm_maximin(
        config.design_k,
        box.dim,
        box,
        iterations=config.design_iterations,
        seed=child_seed(config.seed, "design"),
        swarm_size=config.swarm_size,
    )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    design.save(out / DESIGN_CSV, out / DESIGN_JSON)
    return {
        "design_csv": str(out / DESIGN_CSV),
        "design_json": str(out / DESIGN_JSON),
        "k": design.K,
        "score": design.score,
    }


def _matrix_for_params(args):
    """One forward run; module-level so process pools can pickle it."""
    kwargs, site, wind, n_bins = args
    mat = depo.source_receptor_matrix(ModelParams(**kwargs), site, wind, n_bins=n_bins)
    return mat.values * RATE_UG_PER_TONYR


def _run_forward_batch(param_dicts, site, wind, n_bins, jobs):
    """Forward matrices [ug per (t/yr)] at each parameter set, fanned out
    over processes when jobs > 1. Results keep the input order either way,
    and each run is an independent pure function of its arguments, so the
    parallel path is bitwise-identical to the serial one."""
    work = [(d, site, wind, n_bins) for d in param_dicts]
    if jobs <= 1 or len(work) <= 1:
        values = [_matrix_for_params(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_matrix_for_params, work, chunksize=1))
    return np.asarray(values)


def cmd_snapshot(config: PipelineConfig, jobs: int | None = None) -> dict:
    """Run the forward model at every design point and bundle the results."""
    out = Path(config.out_dir)
    design = doe.DesignSet.load(out / DESIGN_JSON)
    site, wind = load_site_and_wind(config)
    theta = design.physical()
    jobs = config.jobs if jobs is None else jobs
    mats = _run_forward_batch(
        [{"p": row[0], "z0": row[1], "L": row[2]} for row in theta],
        site, wind, config.wind_bins, jobs,
    )
    d, n = mats.shape[1], mats.shape[2]
    receptors = tuple(f"R{i+1}" for i in range(d))
    sources = tuple(f"S{j+1}" for j in range(n))

    snap_dir = out / SNAPSHOT_DIR
    snap_dir.mkdir(parents=True, exist_ok=True)
    for k, values in enumerate(mats):
        depo.SourceReceptorMatrix(values, receptors, sources).to_csv(
            snap_dir / f"point_{k:03d}.csv")
    index = {
        "k": design.K,
        "d": d,
        "n": n,
        "names": list(design.box.names),
        "ranges": [[float(a), float(b)] for a, b in design.box.ranges],
        "wind_bins": config.wind_bins,
        "units": {"deposition": "ug", "rate": "ton/yr"},
        "receptors": list(receptors),
        "sources": list(sources),
        "theta": [_hex_arr(row) for row in theta],
        "matrices": [[_hex_arr(row) for row in m] for m in mats],
    }
    _write_json(snap_dir / SNAPSHOT_INDEX, index)
    return {
        "index": str(snap_dir / SNAPSHOT_INDEX),
        "k": design.K,
        "d": d,
        "n": n,
        "jobs": jobs,
    }


def _load_snapshots(out: Path):
    """Training bundle from the snapshot stage: (theta, matrices, meta)."""
    index = _read_json(Path(out) / SNAPSHOT_DIR / SNAPSHOT_INDEX, "snapshot index")
    theta = np.array([_unhex_arr(row) for row in index["theta"]])
    mats = np.array([[_unhex_arr(row) for row in m] for m in index["matrices"]])
    if mats.shape != (index["k"], index["d"], index["n"]):
        raise ConfigError("snapshot index is inconsistent with its own shape header")
    return theta, mats, index


def cmd_train(config: PipelineConfig) -> dict:
    """Fit one emulator per response-matrix entry and persist the set."""
    out = Path(config.out_dir)
    theta, mats, index = _load_snapshots(out)
    ranges = tuple((a, b) for a, b in index["ranges"])
    emat = gp.emulate_matrix(
        theta, mats, family=config.kernel, ranges=ranges,
        seed=child_seed(config.seed, "train"),
    )
    gp.save_emulated_matrix(emat, out / EMULATOR_JSON)
    return {
        "emulator": str(out / EMULATOR_JSON),
        "entries": int(np.prod(emat.shape)),
        "fallbacks": len(emat.fallbacks),
        "kernel": config.kernel,
    }


def cmd_validate(config: PipelineConfig) -> dict:
    """Leave-one-out validation of per-receptor deposition maps.

    The scalar target for receptor i is the deposition under the
    engineering rate estimates, w_i(theta) = sum_j A_ij(theta) q_eng_j,
    one refit per left-out design point.
    """
    out = Path(config.out_dir)
    theta, mats, index = _load_snapshots(out)
    if len(config.q_eng) != index["n"]:
        raise ConfigError(f"prior.q_eng has {len(config.q_eng)} rates but the site "
                          f"has {index['n']} sources")
    ranges = tuple((a, b) for a, b in index["ranges"])
    targets = mats @ np.asarray(config.q_eng)          # (K, d)

    rows = []
    per_receptor = {}
    all_records = []
    for i, label in enumerate(index["receptors"]):
        records = gp.loocv(theta, targets[:, i], family=config.kernel, ranges=ranges)
        per_receptor[label] = gp.r_squared(records)
        all_records.extend(records)
        for rec in records:
            rows.append((label, rec.index, rec.true_value, rec.predicted_mean,
                         rec.predicted_sd, rec.ok))
    with (out / LOOCV_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["receptor", "design_index", "true_ug",
                         "predicted_ug", "predicted_sd_ug", "ok"])
        for label, idx, true, mean, sd, ok in rows:
            writer.writerow([label, idx, repr(float(true)), repr(float(mean)),
                             repr(float(sd)), int(ok)])
    pooled = gp.r_squared(all_records)
    report = {
        "n_records": len(rows),
        "pooled_r2": pooled,
        "per_receptor_r2": {k: float(v) for k, v in per_receptor.items()},
        "n_failed_fits": sum(1 for r in all_records if not r.ok),
    }
    _write_json(out / VALIDATION_JSON, report)
    return {"loocv_csv": str(out / LOOCV_CSV), **report}


# ---------------------------------------------------------------------------
# sensitivity


def cmd_sensitivity(config: PipelineConfig, jobs: int | None = None) -> dict:
    """Screen all five closure parameters on a coarse forward model.

    Uses its own small design over (p, z0, L, z_i, z_cut) and a reduced
    grid/wind resolution: screening needs rankings, not tight values.
    """
    names = ("p", "z0", "L", "z_i", "z_cut")
    ranges = tuple(self_r for self_r in config.ranges) + (
        tuple(config.sens_zi), tuple(config.sens_zcut))
    box = ParameterBox(names=names, ranges=ranges)
    design = doe.particle_swarm_maximin(
        config.sens_k, box.dim, box,
        iterations=config.sens_iterations,
        seed=child_seed(config.seed, "sensitivity-design"),
    )
    site, wind = load_site_and_wind(config)
    site = dataclasses.replace(site, grid=tuple(config.sens_grid))
    theta = design.physical()
    jobs = config.jobs if jobs is None else jobs
    mats = _run_forward_batch(
        [dict(zip(names, row)) for row in theta],
        site, wind, config.sens_wind_bins, jobs,
    )
    screen = sensitivity.screen_parameters(
        theta, mats, config.q_eng[: mats.shape[2]], ranges, names,
        n_base=config.sens_n_base,
        seed=child_seed(config.seed, "sensitivity"),
        threshold=config.sens_threshold,
    )
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / SENSITIVITY_CSV).write_text(screen.to_csv())
    report = {
        "verdict": screen.verdict(),
        "medians": {name: float(m) for name, m in zip(names, screen.medians)},
        "threshold": config.sens_threshold,
        "k": config.sens_k,
        "grid": list(config.sens_grid),
        "wind_bins": config.sens_wind_bins,
    }
    _write_json(out / SENSITIVITY_JSON, report)
    return {"sensitivity_csv": str(out / SENSITIVITY_CSV), **report}


# ---------------------------------------------------------------------------
# synthetic data


def _noisy_measurements(clean: np.ndarray, lam: float, seed: int) -> np.ndarray:
    """Additive homoscedastic Gaussian noise; lam = 0 returns clean exactly."""
    clean = np.asarray(clean, dtype=float)
    if lam == 0.0:
        return clean.copy()
    rng = np.random.default_rng(seed)
    return clean + math.sqrt(lam) * rng.standard_normal(len(clean))


def cmd_synthesize(config: PipelineConfig) -> dict:
    """Generate synthetic measurements with the full solver.

    The response matrix comes from a fresh forward run at theta_true —
    by construction no emulator is involved — then
    w = A(theta_true) q_true + eps with eps ~ N(0, lambda_true I).
    The noise level is taken from the config either directly
    (lambda_true) or via a target signal-to-noise ratio.
    """
    if config.synthetic_theta is None or config.synthetic_q is None:
        raise ConfigError("cmd_synthesize needs [synthetic] theta_true and q_true")
    box = config.box()
    theta = np.asarray(config.synthetic_theta, dtype=float)
    if theta.shape != (3,) or not box.contains(theta):
        raise ConfigError(f"synthetic.theta_true {config.synthetic_theta} is outside "
                          f"the configured parameter box")
    q_true = np.asarray(config.synthetic_q, dtype=float)
    if np.any(q_true < 0):
        raise ConfigError(f"synthetic.q_true must be nonnegative, got {config.synthetic_q}")

    site, wind = load_site_and_wind(config)
    if len(q_true) != site.n_sources:
        raise ConfigError(f"synthetic.q_true has {len(q_true)} rates but the site "
                          f"has {site.n_sources} sources")
    mat = depo.source_receptor_matrix(
        ModelParams(*theta), site, wind, n_bins=config.wind_bins)
    a_data = mat.values * RATE_UG_PER_TONYR
    clean = a_data @ q_true
    if config.synthetic_lambda is not None:
        lam = float(config.synthetic_lambda)
    elif config.synthetic_snr is not None:
        lam = float(np.mean(clean**2)) / config.synthetic_snr**2
    else:
        raise ConfigError("set [synthetic] lambda_true or snr to fix the noise level")
    w = _noisy_measurements(clean, lam, child_seed(config.seed, "synthesize"))

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / DATA_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["receptor", "deposition_ug"])
        for label, value in zip(mat.receptor_labels, w):
            writer.writerow([label, repr(float(value))])
    meta = {
        "theta_true": [float(v) for v in theta],
        "q_true_ton_yr": [float(v) for v in q_true],
        "lambda_true": lam,
        "snr": (float(np.sqrt(np.mean(w**2)) / math.sqrt(lam)) if lam > 0 else None),
        "seed": config.seed,
        "wind_bins": config.wind_bins,
        "units": {"deposition": "ug", "rate": "ton/yr"},
        "clean": _hex_arr(clean),
        "w": _hex_arr(w),
    }
    _write_json(out / DATA_JSON, meta)
    return {
        "data_csv": str(out / DATA_CSV),
        "lambda_true": lam,
        "snr": meta["snr"],
        "d": len(w),
    }


def load_measurements(config: PipelineConfig) -> np.ndarray:
    """Measurement vector [ug]: the configured data file, or the artifact
    written by cmd_synthesize."""
    path = config.data_file or (Path(config.out_dir) / DATA_CSV)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"measurements not found: {path} "
                          "(set [data] file or run `synthesize` first)")
    values = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["receptor", "deposition_ug"]:
            raise ConfigError(f"malformed measurement file {path}: expected "
                              "'receptor,deposition_ug' header")
        for row in reader:
            if len(row) < 2:
                raise ConfigError(f"malformed measurement row in {path}: {row}")
            try:
                values.append(float(row[1]))
            except ValueError as exc:
                raise ConfigError(f"non-numeric deposition in {path}: {row[1]!r}") from exc
    if not values:
        raise ConfigError(f"no measurement rows in {path}")
    return np.asarray(values)


# ---------------------------------------------------------------------------
# noise calibration / inversion


def _load_emulator(out: Path):
    return gp.load_emulated_matrix(Path(out) / EMULATOR_JSON)


def _prior_for(config: PipelineConfig, n_sources: int, tau: float | None = None):
    if len(config.q_eng) != n_sources:
        raise ConfigError(f"prior.q_eng has {len(config.q_eng)} rates but the "
                          f"emulated matrix has {n_sources} source columns")
    return bayes.build_priors(config.q_eng, config.tau if tau is None else tau,
                              config.box())


def _default_candidates(w: np.ndarray) -> tuple:
    """Noise-variance ladder from target SNR values 30 ... 0.3: four
    decades around the signal power, which is where a sane lambda lives."""
    power = float(np.mean(np.asarray(w) ** 2))
    return tuple(power / snr**2 for snr in (30.0, 10.0, 3.0, 1.0, 0.3))


def cmd_calibrate_noise(config: PipelineConfig) -> dict:
    """Sweep candidate noise variances and report the J-minimizing one."""
    out = Path(config.out_dir)
    emat = _load_emulator(out)
    w = load_measurements(config)
    if len(w) != emat.shape[0]:
        raise ConfigError(f"{len(w)} measurements but the emulator predicts "
                          f"{emat.shape[0]} receptors")
    prior = _prior_for(config, emat.shape[1])
    candidates = config.noise_candidates or _default_candidates(w)
    result = noise_cal.calibrate_lambda(
        emat, w, prior, config.q_eng, candidates,
        mcmc=config.mcmc_params(config.noise_chain_steps),
        master_seed=child_seed(config.seed, "noise"),
    )
    (out / NOISE_CSV).write_text(result.to_csv())
    report = result.to_json_dict()
    report["candidates"] = [float(c) for c in candidates]
    _write_json(out / NOISE_JSON, report)
    return {
        "noise_csv": str(out / NOISE_CSV),
        "lambda_star": result.lam_star,
        "boundary": result.boundary,
        "snr": result.snr,
    }


def _resolve_lambda(config: PipelineConfig, out: Path, lam: float | None) -> float:
    """Noise variance for inversion: explicit argument, else the config's
    fixed value, else the calibration artifact."""
    if lam is not None:
        value = float(lam)
    elif config.lambda_fixed is not None:
        value = float(config.lambda_fixed)
    else:
        noise_path = Path(out) / NOISE_JSON
        if not noise_path.exists():
            raise ConfigError("no noise variance: pass --lam, set [noise] fixed, "
                              "or run `calibrate-noise` first")
        value = float(_read_json(noise_path, "noise report")["lambda_star"])
    if not (value > 0 and math.isfinite(value)):
        raise ConfigError(f"noise variance must be positive and finite, got {value}")
    return value


def _run_inversion(emat, w, prior, params, lam, seed, *, mass=0.68):
    """One adaptive chain plus retained-sample summaries."""
    box = prior.box
    init = np.concatenate([0.5 * (box.lower() + box.upper()), prior.modes()])
    log_post = bayes.make_log_posterior(emat, w, prior, bayes.NoiseModel(lam=lam))
    chain = bayes.adaptive_mh(log_post, init, params, seed=seed)
    retained = bayes.postprocess_chain(chain.states)
    names = tuple(box.names) + tuple(f"q{j+1}" for j in range(prior.n_sources))
    support = list(box.ranges) + [(0.0, math.inf)] * prior.n_sources
    summary = bayes.point_estimates(retained, names, n_theta=box.dim,
                                    support=support, mass=mass)
    return chain, retained, summary, names


def cmd_invert(config: PipelineConfig, lam: float | None = None) -> dict:
    """Sample the joint posterior over (theta, q) and summarize it.

    Writes the retained (burned-in, thinned) samples to chain.csv with
    their original step indices, and the point estimates, credible radii
    and covariance to summary.json.
    """
    out = Path(config.out_dir)
    emat = _load_emulator(out)
    w = load_measurements(config)
    if len(w) != emat.shape[0]:
        raise ConfigError(f"{len(w)} measurements but the emulator predicts "
                          f"{emat.shape[0]} receptors")
    prior = _prior_for(config, emat.shape[1])
    lam = _resolve_lambda(config, out, lam)
    params = config.mcmc_params()
    chain, retained, summary, names = _run_inversion(
        emat, w, prior, params, lam, child_seed(config.seed, "invert"))

    burn_start = int(math.floor(0.5 * params.n_steps))
    with (out / CHAIN_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *names])
        for i, state in enumerate(retained):
            writer.writerow([burn_start + i * 10,
                             *(repr(float(v)) for v in state)])
    report = {
        "summary": summary.to_json_dict(),
        "lambda": lam,
        "n_steps": params.n_steps,
        "burn_in": burn_start,
        "thinning": 10,
        "n_retained": len(retained),
        "acceptance_rate": chain.acceptance_rate,
        "n_nonfinite": chain.n_nonfinite,
        "seed": config.seed,
    }
    _write_json(out / SUMMARY_JSON, report)
    mode = dict(zip(names, (float(v) for v in summary.mode)))
    return {
        "chain_csv": str(out / CHAIN_CSV),
        "summary_json": str(out / SUMMARY_JSON),
        "mode": mode,
        "acceptance_rate": chain.acceptance_rate,
        "n_retained": len(retained),
        "lambda": lam,
    }


# ---------------------------------------------------------------------------
# studies


def cmd_study_prior(config: PipelineConfig, taus=None, lam: float | None = None) -> dict:
    """Posterior spread as a function of the prior quantile ratio tau.

    Reruns the inversion on the same data and emulator for each tau and
    records the 0.99 prior quantiles next to the posterior 68% credible
    radii. Wider priors should not shrink the posterior.
    """
    out = Path(config.out_dir)
    emat = _load_emulator(out)
    w = load_measurements(config)
    taus = tuple(float(t) for t in (taus if taus is not None else config.study_taus))
    if len(set(taus)) < 2 or any(not t > 1 for t in taus):
        raise ConfigError(f"need >= 2 distinct tau values > 1, got {taus}")
    taus = tuple(sorted(taus))
    n = emat.shape[1]
    lam = _resolve_lambda(config, out, lam)
    params = config.mcmc_params(config.study_n_steps or config.mcmc_n_steps)

    per_tau = []
    for tau in taus:
        prior = _prior_for(config, n, tau=tau)
        chain, retained, summary, names = _run_inversion(
            emat, w, prior, params, lam,
            child_seed(config.seed, f"study-prior-tau-{tau:g}"))
        n_theta = prior.box.dim
        per_tau.append({
            "tau": tau,
            "prior_q99": [float(v) for v in prior.q_quantile(0.99)],
            "radius68": [float(v) for v in summary.radius68[n_theta:]],
            "mode": [float(v) for v in summary.mode[n_theta:]],
            "mean": [float(v) for v in summary.mean[n_theta:]],
            "acceptance_rate": chain.acceptance_rate,
        })

    q99 = np.array([row["prior_q99"] for row in per_tau])      # (T, n)
    radii = np.array([row["radius68"] for row in per_tau])
    report = {
        "taus": list(taus),
        "n_steps": params.n_steps,
        "lambda": lam,
        "per_tau": per_tau,
        "prior_q99_strictly_increasing": bool(np.all(np.diff(q99, axis=0) > 0)),
        "radius68_nondecreasing": {
            f"q{j+1}": bool(np.all(np.diff(radii[:, j]) >= 0)) for j in range(n)
        },
    }
    _write_json(out / STUDY_PRIOR_JSON, report)
    with (out / STUDY_PRIOR_CSV).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "source", "prior_q99", "radius68", "mode", "mean"])
        for row in per_tau:
            for j in range(n):
                writer.writerow([repr(row["tau"]), f"q{j+1}",
                                 repr(row["prior_q99"][j]), repr(row["radius68"][j]),
                                 repr(row["mode"][j]), repr(row["mean"][j])])
    return {
        "study_prior_json": str(out / STUDY_PRIOR_JSON),
        "taus": list(taus),
        "prior_q99_strictly_increasing": report["prior_q99_strictly_increasing"],
        "radius68_nondecreasing": report["radius68_nondecreasing"],
    }


def _marginal_kdes(samples_by_k: dict, n_grid: int = 256):
    """Per-source Gaussian KDEs on one shared grid per source.

    Returns {k: (n_sources, n_grid) density array}; the shared grid makes
    max-norm distances between the curves meaningful.
    """
    ks = sorted(samples_by_k)
    n = samples_by_k[ks[0]].shape[1]
    densities = {k: np.empty((n, n_grid)) for k in ks}
    for j in range(n):
        lo = min(float(samples_by_k[k][:, j].min()) for k in ks)
        hi = max(float(samples_by_k[k][:, j].max()) for k in ks)
        if hi <= lo:
            hi = lo + 1.0
        grid = np.linspace(lo, hi, n_grid)
        for k in ks:
            densities[k][j] = stats.gaussian_kde(
                samples_by_k[k][:, j], bw_method="silverman")(grid)
    return densities


def cmd_study_emulator(config: PipelineConfig, k_values=None,
                       lam: float | None = None, jobs: int | None = None) -> dict:
    """Posterior convergence across a hierarchy of design sizes.

    Builds an independent design, snapshot set, emulator and chain for
    each K, then compares the q-marginal KDEs of every run against the
    largest K on a common grid. Shrinking max-norm distances as K grows
    indicate the emulator has stopped moving the posterior.
    """
    out = Path(config.out_dir)
    w = load_measurements(config)
    k_values = tuple(int(k) for k in (k_values if k_values is not None
                                      else config.study_k_values))
    if len(k_values) < 2 or any(k < 8 for k in k_values) or \
            list(k_values) != sorted(set(k_values)):
        raise ConfigError(f"need >= 2 strictly increasing design sizes >= 8, got {k_values}")
    lam = _resolve_lambda(config, out, lam)
    params = config.mcmc_params(config.study_n_steps or config.mcmc_n_steps)
    site, wind = load_site_and_wind(config)
    box = config.box()
    jobs = config.jobs if jobs is None else jobs

    per_k = []
    samples_by_k = {}
    for k in k_values:
        design = doe.particle_swarm_maximin(
            k, box.dim, box,
            iterations=config.design_iterations,
            seed=child_seed(config.seed, f"study-emulator-design-k{k}"),
        )
        theta = design.physical()
        mats = _run_forward_batch(
            [{"p": r[0], "z0": r[1], "L": r[2]} for r in theta],
            site, wind, config.wind_bins, jobs,
        )
        if mats.shape[1] != len(w):
            raise ConfigError(f"{len(w)} measurements but the forward model "
                              f"produces {mats.shape[1]} receptors")
        emat = gp.emulate_matrix(
            theta, mats, family=config.kernel, ranges=box.ranges,
            seed=child_seed(config.seed, f"study-emulator-train-k{k}"),
        )
        prior = _prior_for(config, emat.shape[1])
        chain, retained, summary, names = _run_inversion(
            emat, w, prior, params, lam,
            child_seed(config.seed, f"study-emulator-chain-k{k}"))
        n_theta = box.dim
        samples_by_k[k] = retained[:, n_theta:]
        per_k.append({
            "k": k,
            "design_score": design.score,
            "fallbacks": len(emat.fallbacks),
            "acceptance_rate": chain.acceptance_rate,
            "q_mode": [float(v) for v in summary.mode[n_theta:]],
            "q_radius68": [float(v) for v in summary.radius68[n_theta:]],
        })

    densities = _marginal_kdes(samples_by_k)
    k_ref = k_values[-1]
    distances = {}
    for k in k_values[:-1]:
        per_source = np.max(np.abs(densities[k] - densities[k_ref]), axis=1)
        distances[str(k)] = {
            "per_source": {f"q{j+1}": float(v) for j, v in enumerate(per_source)},
            "max": float(per_source.max()),
        }
    dist_seq = [distances[str(k)]["max"] for k in k_values[:-1]]
    report = {
        "k_values": list(k_values),
        "reference_k": k_ref,
        "n_steps": params.n_steps,
        "lambda": lam,
        "per_k": per_k,
        "kde_max_norm_vs_reference": distances,
        "distances_decreasing": bool(all(a > b for a, b in zip(dist_seq, dist_seq[1:]))),
    }
    _write_json(out / STUDY_EMULATOR_JSON, report)
    return {
        "study_emulator_json": str(out / STUDY_EMULATOR_JSON),
        "k_values": list(k_values),
        "kde_max_norm_vs_reference": {k: v["max"] for k, v in distances.items()},
        "distances_decreasing": report["distances_decreasing"],
    }


# ---------------------------------------------------------------------------
# report


def _fmt(x, nd=4) -> str:
    return f"{x:.{nd}g}" if isinstance(x, (int, float)) else str(x)


def cmd_report(config: PipelineConfig) -> dict:
    """Roll every artifact present in the output directory into report.md."""
    out = Path(config.out_dir)
    sections = []
    lines = ["# Calibration pipeline report", ""]

    design_path = out / DESIGN_JSON
    if design_path.exists():
        design = doe.DesignSet.load(design_path)
        sections.append("design")
        lines += [
            "## Design",
            f"- {design.K} points over {design.m} parameters, "
            f"maximin score {_fmt(design.score)}",
            "",
        ]
    snap_path = out / SNAPSHOT_DIR / SNAPSHOT_INDEX
    if snap_path.exists():
        index = _read_json(snap_path, "snapshot index")
        sections.append("snapshots")
        lines += [
            "## Snapshots",
            f"- {index['k']} forward runs, {index['d']} receptors x "
            f"{index['n']} sources, {index['wind_bins']} wind bins",
            "",
        ]
    if (out / VALIDATION_JSON).exists():
        v = _read_json(out / VALIDATION_JSON, "validation report")
        sections.append("validation")
        lines += ["## Leave-one-out validation",
                  f"- pooled R^2 {_fmt(v['pooled_r2'])} over {v['n_records']} records"]
        for label, r2 in v["per_receptor_r2"].items():
            lines.append(f"  - {label}: R^2 {_fmt(r2)}")
        lines.append("")
    if (out / SENSITIVITY_JSON).exists():
        s = _read_json(out / SENSITIVITY_JSON, "sensitivity report")
        sections.append("sensitivity")
        verdict = s["verdict"]
        lines += ["## Sensitivity screening",
                  f"- kept: {', '.join(verdict['kept']) or 'none'}",
                  f"- fixed: {', '.join(verdict['fixed']) or 'none'}"]
        if verdict.get("kept_by_override"):
            lines.append(f"- kept by coupling override: "
                         f"{', '.join(verdict['kept_by_override'])}")
        lines.append("- median total indices: " + ", ".join(
            f"{name} {_fmt(m)}" for name, m in s["medians"].items()))
        lines.append("")
    if (out / DATA_JSON).exists():
        meta = _read_json(out / DATA_JSON, "data metadata")
        sections.append("data")
        lines += ["## Synthetic measurements",
                  f"- theta_true {meta['theta_true']}, "
                  f"q_true {meta['q_true_ton_yr']} t/yr",
                  f"- lambda_true {_fmt(meta['lambda_true'])}, "
                  f"SNR {_fmt(meta['snr']) if meta['snr'] is not None else 'exact'}",
                  ""]
    if (out / NOISE_JSON).exists():
        nrep = _read_json(out / NOISE_JSON, "noise report")
        sections.append("noise")
        lines += ["## Noise calibration",
                  f"- lambda* {_fmt(nrep['lambda_star'])} "
                  f"(boundary: {nrep['boundary']}), SNR {_fmt(nrep['snr'])}",
                  ""]
    if (out / SUMMARY_JSON).exists():
        rep = _read_json(out / SUMMARY_JSON, "inversion summary")
        sections.append("inversion")
        summary = rep["summary"]
        lines += ["## Inversion",
                  f"- {rep['n_retained']} retained of {rep['n_steps']} steps "
                  f"(acceptance {_fmt(rep['acceptance_rate'])}), "
                  f"lambda {_fmt(rep['lambda'])}",
                  "",
                  "| parameter | mode | mean | 68% radius |",
                  "|---|---|---|---|"]
        for i, name in enumerate(summary["names"]):
            lines.append(f"| {name} | {_fmt(summary['mode'][i])} | "
                         f"{_fmt(summary['mean'][i])} | "
                         f"{_fmt(summary['radius68'][i])} |")
        lines.append("")
    if (out / STUDY_PRIOR_JSON).exists():
        sp = _read_json(out / STUDY_PRIOR_JSON, "prior study")
        sections.append("study_prior")
        lines += ["## Prior-spread study",
                  f"- taus {sp['taus']}",
                  f"- prior 0.99 quantiles strictly increasing: "
                  f"{sp['prior_q99_strictly_increasing']}",
                  f"- posterior 68% radii nondecreasing: "
                  f"{sp['radius68_nondecreasing']}",
                  ""]
    if (out / STUDY_EMULATOR_JSON).exists():
        se = _read_json(out / STUDY_EMULATOR_JSON, "emulator study")
        sections.append("study_emulator")
        lines += ["## Emulator-hierarchy study",
                  f"- design sizes {se['k_values']} (reference {se['reference_k']})"]
        for k, dist in se["kde_max_norm_vs_reference"].items():
            lines.append(f"  - K={k} vs K={se['reference_k']}: "
                         f"max-norm KDE distance {_fmt(dist['max'])}")
        lines.append(f"- distances decreasing: {se['distances_decreasing']}")
        lines.append("")
    if not sections:
        raise ConfigError(f"nothing to report: no artifacts under {out}")
    (out / REPORT_MD).write_text("\n".join(lines))
    return {"report": str(out / REPORT_MD), "sections": sections}
