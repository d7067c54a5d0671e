"""Gaussian-process emulation tests: kernel oracles, conditioning against
independent dense solves, interpolation invariants, LOOCV, matrix emulation,
and bit-exact persistence."""

import json
import logging
import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from plumecal.doe import latin_hypercube
from plumecal.errors import ConfigError, ContractError, NumericsError
from plumecal import gp
from plumecal.gp import (
    EmulatedMatrix,
    KERNEL_FAMILIES,
    OutOfBoxWarning,
    emulate_matrix,
    fit,
    kernel_matrix,
    kernel_value,
    load_emulated_matrix,
    loocv,
    r_squared,
    save_emulated_matrix,
)

# ---------------------------------------------------------------------------
# kernels


@pytest.mark.parametrize("family", KERNEL_FAMILIES)
def test_kernel_at_zero_is_r1(family):
    assert kernel_value(family, 0.0, 2.5, 0.7) == pytest.approx(2.5, rel=1e-15)


@pytest.mark.parametrize("family", KERNEL_FAMILIES)
def test_kernel_bounded_by_r1_and_decaying(family):
    s = np.linspace(0.0, 5.0, 200)
    k = kernel_value(family, s, 1.3, 0.4)
    assert np.all(k <= 1.3 + 1e-15)
    assert np.all(k >= 0.0)
    assert np.all(np.diff(k) <= 1e-15)  # monotone decreasing for these families


def test_squared_exponential_frozen_value():
    # exponent -s^2/(2 r2) = -1 at s = sqrt(2), r2 = 1
    assert kernel_value("squared_exponential", math.sqrt(2.0), 1.0, 1.0) == pytest.approx(
        math.exp(-1.0), rel=1e-14
    )


def test_matern32_frozen_value():
    # (1 + sqrt(3)/sqrt(3)) * exp(-sqrt(3)/sqrt(3)) = 2/e
    assert kernel_value("matern32", 1.0, 1.0, math.sqrt(3.0)) == pytest.approx(
        0.7357588823428847, rel=1e-14
    )


def test_exponential_frozen_value():
    assert kernel_value("exponential", 2.0, 1.0, 1.0) == pytest.approx(
        math.exp(-2.0), rel=1e-14
    )


def test_kernel_rejects_bad_arguments():
    with pytest.raises(ContractError):
        kernel_value("brownian", 1.0, 1.0, 1.0)
    with pytest.raises(ContractError):
        kernel_value("matern32", 1.0, -1.0, 1.0)
    with pytest.raises(ContractError):
        kernel_value("matern32", 1.0, 1.0, 0.0)


def test_gram_matrix_exactly_symmetric():
    rng = np.random.default_rng(3)
    X = rng.random((12, 3))
    G = kernel_matrix("matern52", X, X, 1.7, 0.3)
    assert np.max(np.abs(G - G.T)) == 0.0


# ---------------------------------------------------------------------------
# conditioning oracles


def test_two_point_closed_form_oracle():
    """K=2 design {0,1}, values {0,1}, sqexp r1=r2=1: direct 2x2 solve."""
    emu = fit(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]),
              "squared_exponential", fixed=(1.0, 1.0))
    mean, var = emu.predict([0.5])

    # independent dense oracle with the same jitter, no factorization reuse
    X = np.array([[0.0], [1.0]])
    K = np.exp(-0.5 * np.array([[0.0, 1.0], [1.0, 0.0]])) + emu.jitter * np.eye(2)
    k = np.exp(-0.5 * np.array([0.25, 0.25]))
    g = np.array([0.0, 1.0]) - 0.5
    sol = np.linalg.solve(K, g)
    mean_oracle = 0.5 + k @ sol
    var_oracle = 1.0 - k @ np.linalg.solve(K, k)

    assert mean == pytest.approx(mean_oracle, abs=1e-10)
    assert var == pytest.approx(var_oracle, abs=1e-10)
    # frozen closed-form values (jitter-free algebra)
    assert mean == pytest.approx(0.5, abs=1e-9)
    assert var == pytest.approx(0.030456370859785253, abs=1e-8)


@pytest.mark.parametrize("family", KERNEL_FAMILIES)
def test_dense_solve_equivalence_small_k(family):
    """Emulator agrees with an independent dense solve within 1e-10, K<=10."""
    rng = np.random.default_rng(11)
    X = rng.random((8, 2))
    g = np.sin(3 * X[:, 0]) + X[:, 1] ** 2
    emu = fit(X, g, family, fixed=(1.4, 0.5))

    K = kernel_matrix(family, X, X, 1.4, 0.5) + emu.jitter * np.eye(8)
    c = float(g.mean())
    pts = rng.random((20, 2))
    for p in pts:
        k = kernel_matrix(family, p[None, :], X, 1.4, 0.5)[0]
        mean_oracle = c + k @ np.linalg.solve(K, g - c)
        var_oracle = 1.4 - k @ np.linalg.solve(K, k)
        mean, var = emu.predict(p)
        assert mean == pytest.approx(mean_oracle, abs=1e-10)
        assert var == pytest.approx(max(var_oracle, 0.0), abs=1e-10)


# ---------------------------------------------------------------------------
# fit + predict invariants


def _smooth_fit(seed=5, K=20):
    X = latin_hypercube(K, 2, seed=seed)
    g = 3.0 * X[:, 0] - X[:, 1] + 0.8 * np.sin(4.0 * X[:, 0])
    return X, g, fit(X, g)


def test_design_point_reproduction_and_variance():
    X, g, emu = _smooth_fit()
    scale = float(np.max(np.abs(g - g.mean())))
    for k in range(len(g)):
        mean, var = emu.predict(X[k])
        assert abs(mean - g[k]) <= 1e-8 * scale
        assert 0.0 <= var <= 1e-8 * emu.r1 * (1 + 1e-9)


def test_far_field_variance_approaches_r1():
    X = np.linspace(0.0, 0.2, 6)[:, None]
    g = np.sin(10 * X[:, 0])
    emu = fit(X, g, "squared_exponential", fixed=(1.0, 1e-4))
    mean, var = emu.predict([0.9])
    assert abs(var - 1.0) <= 1e-6
    assert mean == pytest.approx(float(g.mean()), abs=1e-9)


def test_constant_values_predict_constant():
    X = latin_hypercube(10, 3, seed=2)
    emu = fit(X, np.full(10, 4.25))
    assert emu.degenerate
    pts = np.random.default_rng(0).random((25, 3))
    means, vars_ = emu.predict_many(pts)
    assert np.all(np.abs(means - 4.25) <= 1e-6)
    assert np.all(vars_ == 0.0)


def test_fit_is_deterministic():
    X, g, emu1 = _smooth_fit(seed=9)
    emu2 = fit(X, g)
    assert emu1.r1 == emu2.r1
    assert emu1.r2 == emu2.r2
    assert emu1.jitter == emu2.jitter
    p = np.array([0.37, 0.61])
    assert emu1.predict(p) == emu2.predict(p)


def test_mean_square_continuity():
    X, g, emu = _smooth_fit(seed=13)
    span = float(np.ptp(g))
    for theta in ([0.3, 0.4], [0.7, 0.2], [0.5, 0.9]):
        m0, _ = emu.predict(theta)
        m1, _ = emu.predict(np.asarray(theta) + 1e-6)
        assert abs(m1 - m0) < 1e-3 * span


def test_fit_input_validation():
    X = latin_hypercube(6, 2, seed=0)
    with pytest.raises(ContractError):
        fit(X[:1], np.array([1.0]))
    with pytest.raises(ContractError):
        fit(X, np.ones(5))
    with pytest.raises(ContractError):
        fit(X, np.array([1, 2, 3, np.nan, 5, 6.0]))
    with pytest.raises(ContractError):
        fit(X, np.ones(6), "cubic")
    with pytest.raises(ContractError):
        fit(X, np.arange(6.0), ranges=[(0.0, 1.0), (1.0, 1.0)])


def test_out_of_box_prediction_warns():
    X, g, emu = _smooth_fit(seed=4, K=8)
    with pytest.warns(OutOfBoxWarning):
        emu.predict([1.5, 0.5])


def test_physical_ranges_scaling():
    """Fitting physical inputs with ranges equals fitting pre-scaled inputs."""
    rng = np.random.default_rng(21)
    U = rng.random((12, 2))
    ranges = np.array([[0.0, 0.6], [-600.0, -2.0]])
    phys = ranges[:, 0] + U * (ranges[:, 1] - ranges[:, 0])
    g = np.cos(2 * U[:, 0]) + U[:, 1]
    emu_phys = fit(phys, g, ranges=ranges)
    emu_unit = fit(U, g)
    p_unit = np.array([0.3, 0.7])
    p_phys = ranges[:, 0] + p_unit * (ranges[:, 1] - ranges[:, 0])
    m1, v1 = emu_phys.predict(p_phys)
    m2, v2 = emu_unit.predict(p_unit)
    assert m1 == pytest.approx(m2, rel=1e-9, abs=1e-12)
    assert v1 == pytest.approx(v2, rel=1e-6, abs=1e-12)


# ---------------------------------------------------------------------------
# LOOCV


def test_loocv_smooth_target_r_squared():
    X = latin_hypercube(24, 3, seed=7)
    g = 1.0 + 2.0 * X[:, 0] - X[:, 1] + 0.5 * X[:, 2]
    records = loocv(X, g)
    assert len(records) == 24
    assert all(r.ok for r in records)
    assert r_squared(records) > 0.95


def test_loocv_record_count_minimum():
    X = latin_hypercube(3, 1, seed=1)
    g = np.array([0.0, 1.0, 0.5])
    assert len(loocv(X, g)) == 3
    with pytest.raises(ContractError):
        loocv(X[:2], g[:2])


def test_loocv_flags_fit_failures(monkeypatch):
    X = latin_hypercube(5, 2, seed=3)
    g = X[:, 0] + X[:, 1]
    real_fit = gp.fit
    calls = {"k": 0}

    def flaky(*args, **kwargs):
        calls["k"] += 1
        if calls["k"] == 2:
            raise NumericsError("synthetic failure")
        return real_fit(*args, **kwargs)

    monkeypatch.setattr(gp, "fit", flaky)
    records = gp.loocv(X, g)
    assert [r.ok for r in records].count(False) == 1
    assert math.isnan([r for r in records if not r.ok][0].predicted_mean)


# ---------------------------------------------------------------------------
# matrix emulation


def _matrix_snapshots(K=16, d=3, n=2, seed=17):
    """Smooth positive synthetic maps, entries O(1)."""
    X = latin_hypercube(K, 3, seed=seed)
    centres = np.linspace(0.2, 0.8, d * n).reshape(d, n)
    snaps = np.empty((K, d, n))
    for i in range(d):
        for j in range(n):
            c = centres[i, j]
            snaps[:, i, j] = 1.0 + (i + 1) * np.exp(
                -np.sum((X - c) ** 2, axis=1)
            ) + 0.3 * j * X[:, 0]
    return X, snaps


def test_emulated_matrix_shape_and_count():
    X = latin_hypercube(6, 3, seed=1)
    snaps = np.ones((6, 9, 4))  # constant maps fit degenerately, cheap
    em = emulate_matrix(X, snaps)
    assert em.shape == (9, 4)
    assert len(em.emulators) == 36
    assert em.predict([0.5, 0.5, 0.5]).shape == (9, 4)


def test_emulated_matrix_reproduces_snapshots():
    X, snaps = _matrix_snapshots()
    em = emulate_matrix(X, snaps)
    for k in (0, 7, 15):
        pred = em.predict(X[k])
        assert np.max(np.abs(pred - snaps[k]) / np.abs(snaps[k])) < 1e-6


def test_emulated_matrix_fast_path_matches_per_entry():
    X, snaps = _matrix_snapshots(seed=23)
    em = emulate_matrix(X, snaps, "matern52")
    theta = np.array([0.4, 0.6, 0.1])
    fast = em.predict(theta)
    slow = np.array(
        [[em.entry(i, j).predict(theta)[0] for j in range(em.shape[1])]
         for i in range(em.shape[0])]
    )
    np.testing.assert_allclose(fast, np.maximum(slow, 0.0), rtol=1e-12, atol=1e-15)


def test_emulated_matrix_clamps_negative_predictions(caplog):
    X = latin_hypercube(5, 2, seed=9)
    snaps = np.full((5, 1, 1), -1.0)
    em = emulate_matrix(X, snaps)
    with caplog.at_level(logging.DEBUG, logger="plumecal.gp"):
        out = em.predict([0.5, 0.5])
    assert out[0, 0] == 0.0
    assert any("clamped" in r.message for r in caplog.records)


def test_emulated_matrix_with_variance():
    X, snaps = _matrix_snapshots(K=10)
    em = emulate_matrix(X, snaps)
    means, varis = em.predict([0.5, 0.5, 0.5], with_variance=True)
    assert means.shape == varis.shape == (3, 2)
    assert np.all(varis >= 0.0)


def test_emulate_matrix_fallback_on_fit_failure(monkeypatch):
    X, snaps = _matrix_snapshots(K=8)
    real_fit = gp.fit
    calls = {"k": 0}

    def flaky(*args, **kwargs):
        calls["k"] += 1
        if calls["k"] == 2:  # second entry, i.e. (0, 1)
            raise NumericsError("synthetic failure")
        return real_fit(*args, **kwargs)

    monkeypatch.setattr(gp, "fit", flaky)
    with pytest.warns(UserWarning, match="nearest-neighbour"):
        em = gp.emulate_matrix(X, snaps)
    assert em.fallbacks == ((0, 1),)
    # the fallback entry returns the value at the nearest design point
    pred = em.predict(X[3])
    assert pred[0, 1] == pytest.approx(snaps[3, 0, 1], rel=1e-12)


def test_emulate_matrix_rejects_misaligned_snapshots():
    X = latin_hypercube(6, 3, seed=1)
    with pytest.raises(ContractError):
        emulate_matrix(X, np.ones((5, 2, 2)))
    with pytest.raises(ContractError):
        emulate_matrix(X, np.ones((6, 4)))


# ---------------------------------------------------------------------------
# persistence


def test_save_load_round_trip_bitwise(tmp_path):
    X, snaps = _matrix_snapshots(K=8)
    em = emulate_matrix(X, snaps)
    path = tmp_path / "emulator.json"
    save_emulated_matrix(em, path)
    em2 = load_emulated_matrix(path)
    assert em2.shape == em.shape
    rng = np.random.default_rng(2)
    for theta in rng.random((5, 3)):
        assert_array_equal(em.predict(theta), em2.predict(theta))
    m1, v1 = em.predict([0.5, 0.5, 0.5], with_variance=True)
    m2, v2 = em2.predict([0.5, 0.5, 0.5], with_variance=True)
    assert_array_equal(m1, m2)
    assert_array_equal(v1, v2)


def test_save_load_preserves_fallbacks(tmp_path, monkeypatch):
    X, snaps = _matrix_snapshots(K=8)
    real_fit = gp.fit
    calls = {"k": 0}

    def flaky(*args, **kwargs):
        calls["k"] += 1
        if calls["k"] == 1:
            raise NumericsError("synthetic failure")
        return real_fit(*args, **kwargs)

    monkeypatch.setattr(gp, "fit", flaky)
    with pytest.warns(UserWarning):
        em = gp.emulate_matrix(X, snaps)
    path = tmp_path / "em.json"
    save_emulated_matrix(em, path)
    em2 = load_emulated_matrix(path)
    assert em2.fallbacks == em.fallbacks == ((0, 0),)
    assert_array_equal(em.predict(X[2]), em2.predict(X[2]))


def test_load_missing_or_malformed(tmp_path):
    with pytest.raises(ConfigError):
        load_emulated_matrix(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"shape": [2, 2], "entries": []}))
    with pytest.raises(ConfigError):
        load_emulated_matrix(bad)


def test_hex_serialization_preserves_every_bit(tmp_path):
    X, snaps = _matrix_snapshots(K=8)
    em = emulate_matrix(X, snaps)
    path = tmp_path / "em.json"
    save_emulated_matrix(em, path)
    doc = json.loads(path.read_text())
    e0 = doc["entries"][0]
    emu0 = em.entry(0, 0)
    assert float.fromhex(e0["r1"]) == emu0.r1
    assert float.fromhex(e0["r2"]) == emu0.r2
    assert [float.fromhex(v) for v in e0["values"]] == list(emu0.values)
