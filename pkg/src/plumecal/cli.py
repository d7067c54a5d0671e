"""Command-line front end for the calibration pipeline.

One subcommand per pipeline stage::

    plumecal design          --config run.toml
    plumecal snapshot        --config run.toml --jobs 4
    plumecal train           --config run.toml
    plumecal validate        --config run.toml
    plumecal sensitivity     --config run.toml --jobs 4
    plumecal synthesize      --config run.toml
    plumecal calibrate-noise --config run.toml
    plumecal invert          --config run.toml [--lam 2.8e-5]
    plumecal study-prior     --config run.toml [--taus 2,3,4]
    plumecal study-emulator  --config run.toml [--k-values 16,32,64]
    plumecal report          --config run.toml

Every command prints a small JSON result to stdout on success. On
failure it prints a machine-readable error object to stderr and exits
with 2 for configuration problems, 3 for numerical failures, and 4 for
contract violations.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .errors import ConfigError, ContractError, NumericsError

EXIT_CONFIG = 2
EXIT_NUMERICS = 3
EXIT_CONTRACT = 4


def _float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline TOML file")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides [pipeline] seed)")
    common.add_argument("--out", default=None,
                        help="output directory (overrides [pipeline] out)")
    common.add_argument("--jobs", type=int, default=None,
                        help="worker processes for forward-model fan-out")

    parser = argparse.ArgumentParser(
        prog="plumecal",
        description="Dispersion-model calibration and source-rate inversion pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("design", parents=[common],
                   help="space-filling design for the training runs")
    sub.add_parser("snapshot", parents=[common],
                   help="forward-model run at every design point")
    sub.add_parser("train", parents=[common],
                   help="fit the matrix emulator from the snapshots")
    sub.add_parser("validate", parents=[common],
                   help="leave-one-out validation of the emulated maps")
    sub.add_parser("sensitivity", parents=[common],
                   help="screen closure parameters on a coarse forward model")
    sub.add_parser("synthesize", parents=[common],
                   help="generate synthetic measurements with the full solver")
    sub.add_parser("calibrate-noise", parents=[common],
                   help="sweep noise variances and pick the J-minimizing one")
    p_invert = sub.add_parser("invert", parents=[common],
                              help="sample the joint posterior and summarize it")
    p_invert.add_argument("--lam", type=float, default=None,
                          help="noise variance (overrides config and calibration)")
    p_prior = sub.add_parser("study-prior", parents=[common],
                             help="posterior spread vs the prior quantile ratio")
    p_prior.add_argument("--taus", type=_float_list, default=None,
                         help="comma-separated quantile ratios, e.g. 2,3,4")
    p_prior.add_argument("--lam", type=float, default=None,
                         help="noise variance (overrides config and calibration)")
    p_em = sub.add_parser("study-emulator", parents=[common],
                          help="posterior convergence across design sizes")
    p_em.add_argument("--k-values", type=_int_list, default=None,
                      help="comma-separated design sizes, e.g. 16,32,64")
    p_em.add_argument("--lam", type=float, default=None,
                      help="noise variance (overrides config and calibration)")
    sub.add_parser("report", parents=[common],
                   help="roll all artifacts into report.md")
    return parser


def _dispatch(ns: argparse.Namespace) -> dict:
    config = pipeline.PipelineConfig.from_toml(
        ns.config, seed=ns.seed, out=ns.out, jobs=ns.jobs)
    if ns.command == "design":
        return pipeline.cmd_design(config)
    if ns.command == "snapshot":
        return pipeline.cmd_snapshot(config, jobs=ns.jobs)
    if ns.command == "train":
        return pipeline.cmd_train(config)
    if ns.command == "validate":
        return pipeline.cmd_validate(config)
    if ns.command == "sensitivity":
        return pipeline.cmd_sensitivity(config, jobs=ns.jobs)
    if ns.command == "synthesize":
        return pipeline.cmd_synthesize(config)
    if ns.command == "calibrate-noise":
        return pipeline.cmd_calibrate_noise(config)
    if ns.command == "invert":
        return pipeline.cmd_invert(config, lam=ns.lam)
    if ns.command == "study-prior":
        return pipeline.cmd_study_prior(config, taus=ns.taus, lam=ns.lam)
    if ns.command == "study-emulator":
        return pipeline.cmd_study_emulator(config, k_values=ns.k_values,
                                           lam=ns.lam, jobs=ns.jobs)
    if ns.command == "report":
        return pipeline.cmd_report(config)
    raise ConfigError(f"unknown command {ns.command!r}")  # pragma: no cover


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        result = _dispatch(ns)
    except ConfigError as exc:
        _emit_error(exc, EXIT_CONFIG)
        return EXIT_CONFIG
    except NumericsError as exc:
        _emit_error(exc, EXIT_NUMERICS)
        return EXIT_NUMERICS
    except ContractError as exc:
        _emit_error(exc, EXIT_CONTRACT)
        return EXIT_CONTRACT
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def _emit_error(exc: Exception, code: int) -> None:
    json.dump({"error": type(exc).__name__, "message": str(exc), "exit_code": code},
              sys.stderr, indent=2)
    sys.stderr.write("\n")


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
