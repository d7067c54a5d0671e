"""Space-filling experimental designs on the unit cube.

A design is K points in [0,1]^m, scored by the maximin criterion (the
smallest pairwise Euclidean distance). Designs start as Latin hypercube
draws — one point per axis stratum — and are then pushed toward larger
maximin scores by a global-best particle swarm whose particles are whole
flattened designs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .forward.params import ParameterBox


def _lhd(K: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube draw: per axis, one uniform point in each of the
    K strata [k/K, (k+1)/K), independently permuted across axes."""
    u = (rng.random((K, m)) + np.arange(K)[:, None]) / K
    for axis in range(m):
        u[:, axis] = u[rng.permutation(K), axis]
    return u


def latin_hypercube(K: int, m: int, seed: int) -> np.ndarray:
    """Seeded Latin hypercube design, shape (K, m), values in [0, 1)."""
    if K < 1 or m < 1:
        raise ContractError(f"need K >= 1 and m >= 1, got K={K}, m={m}")
    return _lhd(K, m, np.random.default_rng(seed))


def maximin_score(design: np.ndarray) -> float:
    """Smallest pairwise Euclidean distance between design points."""
    design = np.atleast_2d(np.asarray(design, dtype=float))
    K = design.shape[0]
    if K < 2:
        raise ContractError("maximin score needs at least two points")
    diff = design[:, None, :] - design[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    d2[np.diag_indices(K)] = np.inf
    return float(np.sqrt(d2.min()))


def _swarm_scores(positions: np.ndarray, K: int, m: int) -> np.ndarray:
    """Maximin score of every particle at once. positions: (S, K*m)."""
    X = positions.reshape(-1, K, m)
    diff = X[:, :, None, :] - X[:, None, :, :]
    d2 = np.einsum("sijk,sijk->sij", diff, diff)
    idx = np.arange(K)
    d2[:, idx, idx] = np.inf
    return np.sqrt(d2.reshape(len(X), -1).min(axis=1))


@dataclass(frozen=True)
class DesignSet:
    """A scored design with its physical interpretation.

    ``points_unit`` live on [0,1]^m; ``box`` maps them to physical
    coordinates. ``score_trace`` records the best maximin score after
    each swarm iteration (element 0 is the initializer's score).
    """

    points_unit: np.ndarray
    box: ParameterBox
    score: float
    seed: int
    iterations: int
    score_trace: tuple = ()

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points_unit, dtype=float))
        object.__setattr__(self, "points_unit", pts)
        if pts.shape[1] != self.box.dim:
            raise ContractError(
                f"design has {pts.shape[1]} axes but box has {self.box.dim}"
            )
        if np.any(pts < 0) or np.any(pts > 1):
            raise ContractError("design points must lie in the unit cube")

    @property
    def K(self) -> int:
        return self.points_unit.shape[0]

    @property
    def m(self) -> int:
        return self.points_unit.shape[1]

    def physical(self) -> np.ndarray:
        return self.box.from_unit(self.points_unit)

    def save(self, csv_path, json_path) -> None:
        """Physical CSV for reading, hex-float JSON sidecar for bit-exact
        reload (the unit coordinates are authoritative)."""
        phys = self.physical()
        with Path(csv_path).open("w") as fh:
            fh.write("k," + ",".join(f"theta_{i+1}" for i in range(self.m)) + "\n")
            for k, row in enumerate(phys):
                fh.write(f"{k}," + ",".join(repr(float(v)) for v in row) + "\n")
        sidecar = {
            "score": self.score.hex(),
            "seed": self.seed,
            "iterations": self.iterations,
            "names": list(self.box.names),
            "ranges": [[float(a), float(b)] for a, b in self.box.ranges],
            "points_unit": [[float(v).hex() for v in row] for row in self.points_unit],
            "score_trace": [float(s).hex() for s in self.score_trace],
        }
        Path(json_path).write_text(json.dumps(sidecar, indent=1))

    @classmethod
    def load(cls, json_path) -> "DesignSet":
        path = Path(json_path)
        if not path.exists():
            raise ConfigError(f"design sidecar not found: {path}")
        raw = json.loads(path.read_text())
        box = ParameterBox(
            names=tuple(raw["names"]),
            ranges=tuple((float(a), float(b)) for a, b in raw["ranges"]),
        )
        pts = np.array([[float.fromhex(v) for v in row] for row in raw["points_unit"]])
        return cls(
            points_unit=pts,
            box=box,
            score=float.fromhex(raw["score"]),
            seed=int(raw["seed"]),
            iterations=int(raw["iterations"]),
            score_trace=tuple(float.fromhex(s) for s in raw["score_trace"]),
        )


def particle_swarm_maximin(
    K: int,
    m: int,
    box: ParameterBox,
    *,
    iterations: int = 2000,
    seed: int = 0,
    swarm_size: int = 30,
    inertia: float = 0.7,
    cognitive: float = 1.5,
    social: float = 1.5,
    velocity_clamp: float = 0.25,
) -> DesignSet:
    """Maximin-optimized design via global-best PSO over flattened designs.

    The swarm is seeded with independent Latin hypercube designs; particle
    0 is *the* initializer, which is returned unchanged when
    ``iterations == 0``. The reported best is never worse than that
    initializer and its score trace is nondecreasing.
    """
    if K < 2:
        raise ContractError("a maximin design needs K >= 2 points")
    if m != box.dim:
        raise ContractError(f"m={m} does not match box dimension {box.dim}")
    if iterations < 0 or swarm_size < 2:
        raise ContractError("need iterations >= 0 and swarm_size >= 2")

    rng = np.random.default_rng(seed)
    dim = K * m
    positions = np.empty((swarm_size, dim))
    for s in range(swarm_size):
        positions[s] = _lhd(K, m, rng).ravel()
    init = positions[0].copy()

    best_design = init.copy()
    best_score = maximin_score(init.reshape(K, m))
    trace = [best_score]

    if iterations > 0:
        velocities = np.zeros_like(positions)
        pbest = positions.copy()
        pbest_score = _swarm_scores(positions, K, m)
        g_idx = int(np.argmax(pbest_score))
        for _ in range(iterations):
            r_cog = rng.random((swarm_size, dim))
            r_soc = rng.random((swarm_size, dim))
            velocities = (
                inertia * velocities
                + cognitive * r_cog * (pbest - positions)
                + social * r_soc * (pbest[g_idx] - positions)
            )
            np.clip(velocities, -velocity_clamp, velocity_clamp, out=velocities)
            positions = np.clip(positions + velocities, 0.0, 1.0)
            scores = _swarm_scores(positions, K, m)
            improved = scores > pbest_score
            pbest[improved] = positions[improved]
            pbest_score[improved] = scores[improved]
            g_idx = int(np.argmax(pbest_score))
            if pbest_score[g_idx] > best_score:
                best_score = float(pbest_score[g_idx])
                best_design = pbest[g_idx].copy()
            trace.append(best_score)

    return DesignSet(
        points_unit=best_design.reshape(K, m),
        box=box,
        score=float(best_score),
        seed=seed,
        iterations=iterations,
        score_trace=tuple(trace),
    )
