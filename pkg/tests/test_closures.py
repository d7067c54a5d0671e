import math

import numpy as np
import pytest

from plumecal.errors import ContractError
from plumecal.forward import (
    ModelParams,
    ParameterBox,
    eddy_diffusivities,
    friction_velocity,
    stability_correction,
    wind_profile,
)


@pytest.fixture
def params():
    return ModelParams(p=0.2, z0=0.05, L=-10.0)


class TestModelParams:
    def test_valid(self, params):
        assert params.z_i == 100.0 and params.z_cut == 2.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(p=-0.1, z0=0.05, L=-10.0),
            dict(p=0.7, z0=0.05, L=-10.0),
            dict(p=0.2, z0=0.0, L=-10.0),
            dict(p=0.2, z0=3.5, L=-10.0),
            dict(p=0.2, z0=0.05, L=0.0),   # neutral stratification rejected
            dict(p=0.2, z0=0.05, L=5.0),   # stable stratification rejected
            dict(p=0.2, z0=0.05, L=-601.0),
            dict(p=0.2, z0=0.05, L=-10.0, z_cut=0.0),
            dict(p=0.2, z0=0.05, L=-10.0, z_i=-1.0),
        ],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ContractError):
            ModelParams(**kwargs)


class TestWindProfile:
    def test_reference_height_returns_reference_speed(self, params):
        # z/z_r = 1 regardless of the exponent
        assert wind_profile(params, 10.0, v_r=5.0, z_r=10.0) == pytest.approx(5.0)

    def test_power_half_quadruple_height(self):
        p = ModelParams(p=0.5, z0=0.05, L=-10.0)
        assert wind_profile(p, 40.0, v_r=3.0, z_r=10.0) == pytest.approx(6.0)

    def test_zero_exponent_flat_profile(self):
        p = ModelParams(p=0.0, z0=0.05, L=-10.0)
        assert wind_profile(p, 37.0, v_r=5.0, z_r=10.0) == pytest.approx(5.0)

    def test_cutoff_below_z_cut(self, params):
        # below z_cut the profile is evaluated at z_cut
        v_at_cut = wind_profile(params, params.z_cut, 5.0)
        assert wind_profile(params, 0.5, 5.0) == v_at_cut
        assert wind_profile(params, 0.0, 5.0) == v_at_cut

    def test_vectorized(self, params):
        z = np.array([2.0, 10.0, 50.0])
        out = wind_profile(params, z, 5.0, 10.0)
        assert out.shape == (3,) and np.all(np.diff(out) > 0)

    def test_negative_speed_rejected(self, params):
        with pytest.raises(ContractError):
            wind_profile(params, 10.0, v_r=-1.0)


class TestStabilityCorrection:
    def test_continuous_at_zero(self):
        assert stability_correction(0.0) == pytest.approx(1.0)
        assert stability_correction(-1e-12) == pytest.approx(1.0)

    def test_unstable_branch(self):
        # (1 - 15*(-0.2))^(-1/2) = 4^(-1/2)
        assert stability_correction(-0.2) == pytest.approx(0.5)

    def test_stable_branch(self):
        assert stability_correction(1.0) == pytest.approx(5.7)


class TestEddyDiffusivities:
    def test_hand_derived_point(self, params):
        # v* = 0.4*5/ln(200), phi(2/-10) = 0.5, so
        # D33 = 0.4 * v* * 2 / 0.5 = 3.2/ln(200)
        d11, d33 = eddy_diffusivities(params, z=2.0, v_r=5.0, z_r=10.0)
        assert d33 == pytest.approx(3.2 / math.log(200.0), rel=1e-12)
        # D11 = v* * 100^(3/4) * (0.4*10)^(-1/3) / 10
        assert d11 == pytest.approx(0.7519783950303924, rel=1e-12)

    def test_friction_velocity_value(self, params):
        assert friction_velocity(params, 5.0, 10.0) == pytest.approx(
            2.0 / math.log(200.0), rel=1e-14
        )

    def test_below_cutoff_matches_cutoff(self, params):
        assert eddy_diffusivities(params, 0.3, 5.0) == eddy_diffusivities(params, 2.0, 5.0)

    def test_positive_over_admissible_box(self):
        # D11, D33 > 0 for any admissible parameters and z
        rng = np.random.default_rng(42)
        for _ in range(50):
            p = ModelParams(
                p=rng.uniform(0, 0.6),
                z0=rng.uniform(0.01, 3.0),
                L=rng.uniform(-600.0, -2.0),
            )
            z = rng.uniform(0.0, 150.0)
            d11, d33 = eddy_diffusivities(p, z, v_r=rng.uniform(0.1, 10.0))
            assert d11 > 0 and d33 > 0

    def test_reference_height_below_roughness_rejected(self):
        p = ModelParams(p=0.2, z0=2.0, L=-10.0)
        with pytest.raises(ContractError):
            eddy_diffusivities(p, 10.0, 5.0, z_r=1.0)

    def test_vectorized_z(self, params):
        d11, d33 = eddy_diffusivities(params, np.array([2.0, 50.0, 100.0]), 5.0)
        assert d33.shape == (3,) and d11.shape == (3,)
        assert np.all(np.diff(d33) > 0)  # grows with height for fixed phi sign


class TestParameterBox:
    def test_unit_roundtrip(self):
        box = ParameterBox()
        theta = np.array([0.3, 0.1, -300.0])
        np.testing.assert_allclose(box.from_unit(box.to_unit(theta)), theta, rtol=1e-12)

    def test_contains(self):
        box = ParameterBox()
        assert box.contains([0.3, 0.1, -300.0])
        assert not box.contains([0.3, 0.1, 100.0])

    def test_bad_range_rejected(self):
        with pytest.raises(ContractError):
            ParameterBox(names=("a",), ranges=((1.0, 1.0),))
