import numpy as np
import pytest

from plumecal.errors import CflError, ContractError, NumericsError
from plumecal.forward import (
    ModelParams,
    SiteConfig,
    WindRecord,
    solve_concentration,
)
from plumecal.forward import solver as solver_mod
from plumecal.forward.solver import Grid


@pytest.fixture
def params():
    return ModelParams(p=0.25, z0=0.1, L=-80.0)


@pytest.fixture
def small_site():
    return SiteConfig(
        name="toy",
        sources=[[-40.0, 0.0, 25.0], [60.0, 30.0, 35.0]],
        receptors=[[150.0, 10.0], [-150.0, -20.0], [0.0, 160.0]],
        domain=((-400.0, 400.0), (-400.0, 400.0), 100.0),
        grid=(12, 12, 10),
        duration=400.0,
    )


@pytest.fixture
def steady_wind():
    return WindRecord([0.0], [4.0], [3.9])  # roughly from SW


@pytest.fixture
def swinging_wind():
    t = np.arange(0.0, 400.0, 50.0)
    return WindRecord(t, 4.0 + np.sin(t / 60.0), 3.9 + 0.5 * np.cos(t / 97.0))


class TestBasics:
    def test_zero_source_stays_zero(self, params, small_site, steady_wind):
        fields = solve_concentration(params, [0.0, 0.0], small_site, steady_wind)
        assert fields[-1].values.max() == 0.0
        assert fields[-1].time == pytest.approx(small_site.duration)

    def test_positivity(self, params, small_site, swinging_wind):
        fields = solve_concentration(params, [1.0, 0.5], small_site, swinging_wind)
        c = fields[-1].values
        assert c.min() >= -1e-12 * c.max()
        assert c.max() > 0

    def test_snapshot_times(self, params, small_site, steady_wind):
        fields = solve_concentration(
            params, [1.0, 0.0], small_site, steady_wind, output_times=[200.0, 400.0]
        )
        assert len(fields) == 2
        assert fields[0].time >= 200.0
        assert fields[1].time == pytest.approx(400.0)
        assert fields[0].time < fields[1].time

    def test_negative_rate_rejected(self, params, small_site, steady_wind):
        with pytest.raises(ContractError):
            solve_concentration(params, [-1.0, 0.0], small_site, steady_wind)

    def test_rate_count_mismatch_rejected(self, params, small_site, steady_wind):
        with pytest.raises(ContractError):
            solve_concentration(params, [1.0], small_site, steady_wind)

    def test_field_csv(self, params, small_site, steady_wind, tmp_path):
        field = solve_concentration(params, [1.0, 0.0], small_site, steady_wind)[-1]
        path = tmp_path / "field.csv"
        field.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "x_m,y_m,z_m,conc"
        assert len(lines) == 1 + 12 * 12 * 10


class TestLinearity:
    def test_doubling_is_bitwise(self, params, small_site, swinging_wind):
        one = solve_concentration(params, [1.0, 0.5], small_site, swinging_wind)[-1].values
        two = solve_concentration(params, [2.0, 1.0], small_site, swinging_wind)[-1].values
        # scaling by 2 commutes exactly with every floating-point op used
        np.testing.assert_array_equal(two, 2.0 * one)

    def test_general_scaling(self, params, small_site, swinging_wind):
        alpha = 3.7
        one = solve_concentration(params, [1.0, 0.5], small_site, swinging_wind)[-1].values
        scaled = solve_concentration(
            params, [alpha * 1.0, alpha * 0.5], small_site, swinging_wind
        )[-1].values
        err = np.abs(scaled - alpha * one).max()
        assert err <= 1e-12 * np.abs(scaled).max()

    def test_superposition(self, params, small_site, swinging_wind):
        a = solve_concentration(params, [1.0, 0.0], small_site, swinging_wind)[-1].values
        b = solve_concentration(params, [0.0, 2.0], small_site, swinging_wind)[-1].values
        ab = solve_concentration(params, [1.0, 2.0], small_site, swinging_wind)[-1].values
        err = np.abs(ab - (a + b)).max()
        assert err <= 1e-10 * np.abs(ab).max()


class TestMassBudget:
    def test_closed_box_conserves_injected_mass(self, params, swinging_wind):
        site = SiteConfig(
            name="box",
            sources=[[-40.0, 0.0, 25.0], [60.0, 30.0, 35.0]],
            receptors=[[150.0, 10.0]],
            domain=((-400.0, 400.0), (-400.0, 400.0), 100.0),
            grid=(12, 12, 10),
            duration=400.0,
            v_set=0.0,
            v_dep=0.0,
        )
        q = np.array([1.3, 0.7])
        field = solve_concentration(params, q, site, swinging_wind, boundary="closed")[-1]
        expected = site.duration * q.sum()
        assert field.total_mass() == pytest.approx(expected, rel=1e-6)

    def test_open_domain_loses_mass(self, params, small_site, steady_wind):
        field = solve_concentration(params, [1.0, 0.0], small_site, steady_wind)[-1]
        assert field.total_mass() < small_site.duration * 1.0


class TestStepControl:
    def test_oversized_step_reports_admissible(self, params, small_site, steady_wind):
        with pytest.raises(CflError) as err:
            solve_concentration(params, [1.0, 0.0], small_site, steady_wind, dt_max=1e6)
        assert err.value.admissible > 0
        assert err.value.requested == 1e6
        assert err.value.admissible < 1e6

    def test_nonpositive_step_rejected(self, params, small_site, steady_wind):
        with pytest.raises(ContractError):
            solve_concentration(params, [1.0, 0.0], small_site, steady_wind, dt_max=0.0)

    def test_small_step_allowed(self, params, small_site, steady_wind):
        fields = solve_concentration(
            params, [1.0, 0.0], small_site, steady_wind, dt_max=0.5
        )
        assert fields[-1].values.max() > 0

    def test_nonfinite_field_detected(self, params, small_site, steady_wind, monkeypatch):
        def bad_solve(l_and_u, ab, rhs, **kwargs):
            out = np.array(rhs, dtype=float)
            out[0, 0] = np.nan
            return out

        monkeypatch.setattr(solver_mod, "solve_banded", bad_solve)
        with pytest.raises(NumericsError, match="non-finite"):
            solve_concentration(params, [1.0, 0.0], small_site, steady_wind)


class TestGrid:
    def test_cell_of_centering(self, small_site):
        grid = Grid.from_site(small_site)
        # domain x in [-400, 400), dx = 66.67: x=0 lands in cell 6 of 12
        assert grid.cell_of(0.0, 0.0) == (6, 6, 0)
        assert grid.cell_of(-399.9, -399.9, 0.0) == (0, 0, 0)
        assert grid.cell_of(399.9, 399.9, 99.9) == (11, 11, 9)

    def test_cell_volume(self, small_site):
        grid = Grid.from_site(small_site)
        assert grid.cell_volume == pytest.approx((800 / 12) * (800 / 12) * 10.0)
