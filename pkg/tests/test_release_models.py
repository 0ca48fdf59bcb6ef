import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matrixchannel.release_models import (
    SERIES_TERM_CAP,
    ConvergenceError,
    DomainError,
    ExtendedRelease,
    MatrixParams,
    check_lee_invertible,
    crank_release_fraction,
    crank_release_fraction_short_time,
    extended_release,
    frenning_front_position,
    frenning_release_fraction,
    frenning_release_time,
    lee_coefficients,
    lee_front_depth,
    lee_release_curve,
    lee_release_fraction,
    lee_time_of_front,
    release_time,
)

RATIOS = (1, 25, 100, 400)


def params(ratio, molecules=1e4):
    return MatrixParams.from_ratio(ratio, 1e-6, 1e-9, molecules)


# values below were computed with 30-digit mpmath from the closed-form
# expressions, independently of the package
A3_DELTA0_R25 = 0.0200080064064071766
LEE_HALF_R100 = 0.872481433823350942
LEE_TAU_HALF_R100 = 8.29146037581501047
CRANK = {0.001: 0.104047446969166267, 0.05: 0.606939756678831950, 0.2: 0.915495566107682124,
         1.0: 0.999968556073312459}
FRENNING_FRONT_R100_TAU1 = 0.850486324279522654


class TestMatrixParams:
    def test_count_and_density_consistent(self):
        p = params(25, 12345)
        assert p.total_molecules == pytest.approx(12345, rel=1e-9)
        assert p.loading_ratio == pytest.approx(25, rel=1e-12)

    @pytest.mark.parametrize("kwargs", [
        dict(loading=1.0, solubility=2.0, radius=1e-6, diffusivity=1e-9),
        dict(loading=1.0, solubility=0.0, radius=1e-6, diffusivity=1e-9),
        dict(loading=1.0, solubility=1.0, radius=0.0, diffusivity=1e-9),
        dict(loading=1.0, solubility=1.0, radius=1e-6, diffusivity=-1.0),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            MatrixParams(**kwargs)

    def test_ratio_below_one_rejected(self):
        with pytest.raises(ValueError):
            params(0.5)


class TestLeeCoefficients:
    def test_fully_dissolved_any_ratio(self):
        for r in RATIOS:
            a1, a2, a3, lam = lee_coefficients(1.0, r)
            assert (a1, lam, a3, a2) == (1.0, 1.0, 1.0, -2.0)

    def test_initial_instant_uses_ratio(self):
        a1, a2, a3, lam = lee_coefficients(0.0, 25)
        assert lam == 25
        assert a3 == pytest.approx(A3_DELTA0_R25, rel=1e-12)
        assert a2 == pytest.approx(-1 - A3_DELTA0_R25, rel=1e-14)

    def test_out_of_range_delta(self):
        with pytest.raises(DomainError):
            lee_coefficients(1.5, 25)


class TestLeeRelease:
    @pytest.mark.parametrize("r", RATIOS)
    def test_endpoint_identity(self, r):
        assert lee_release_fraction(1.0, r) == pytest.approx(1 - 1 / (4 * r), rel=1e-12)

    def test_reported_endpoints(self):
        assert lee_release_fraction(1.0, 25) == pytest.approx(0.99, abs=1e-15)
        assert lee_release_fraction(1.0, 1) == pytest.approx(0.75, abs=1e-15)

    def test_zero_depth(self):
        for r in RATIOS:
            assert lee_release_fraction(0.0, r) == 0.0

    def test_mid_depth_value(self):
        assert lee_release_fraction(0.5, 100) == pytest.approx(LEE_HALF_R100, rel=1e-12)
        t = lee_time_of_front(0.5, params(100))
        assert t / params(100).diffusion_time == pytest.approx(LEE_TAU_HALF_R100, rel=1e-12)

    @pytest.mark.parametrize("r", RATIOS)
    def test_front_time_endpoint(self, r):
        p = params(r)
        assert lee_time_of_front(0.0, p) == 0.0
        assert lee_time_of_front(1.0, p) == pytest.approx(release_time(p), rel=1e-12)

    def test_release_time_examples(self):
        assert release_time(params(1)) == pytest.approx(8.3333e-5, rel=1e-4)
        assert release_time(params(100)) == pytest.approx(1.6583e-2, rel=1e-4)
        assert release_time(params(400)) == pytest.approx(6.6583e-2, rel=1e-4)
        assert release_time(params(25)) / params(25).diffusion_time == pytest.approx(49 / 12)

    def test_curve_round_trip(self):
        p = params(100)
        t = lee_time_of_front(0.5, p)
        curve = lee_release_curve(p, np.array([0.0, t]))
        assert curve.cumulative_fraction[0] == 0.0
        assert curve.cumulative_fraction[1] == pytest.approx(LEE_HALF_R100, rel=1e-9)

    def test_curve_extends_to_one(self):
        p = params(25)
        t_rel = release_time(p)
        curve = lee_release_curve(p, np.array([0.0, t_rel * (1 - 1e-9), t_rel, 2 * t_rel]))
        assert curve.cumulative_fraction[2] == 1.0
        assert curve.cumulative_fraction[3] == 1.0
        # just below t_rel the approximation is still in effect
        assert curve.cumulative_fraction[1] < 1.0
        assert curve.cumulative_count[3] == pytest.approx(1e4)

    def test_front_depth_inverts_time(self):
        p = params(100)
        for delta in (0.01, 0.3, 0.7, 0.95):
            t = lee_time_of_front(delta, p)
            assert lee_front_depth(t, p) == pytest.approx(delta, abs=1e-9)

    @pytest.mark.parametrize("r", RATIOS)
    def test_invertible_below_release_time(self, r):
        check_lee_invertible(r)


class TestFrenning:
    def test_start(self):
        p = params(100)
        assert frenning_front_position(0.0, p) == pytest.approx(1.0, abs=1e-15)
        assert frenning_release_fraction(0.0, p) == pytest.approx(0.0, abs=1e-15)

    def test_negative_front_clamped(self):
        p = params(400)
        t_end = frenning_release_time(p)
        # unclamped root is -Cs/(3A) = -8.33e-4
        assert frenning_front_position(t_end, p) == 0.0
        assert abs(frenning_release_fraction(release_time(p), p) - 1) < 2.5e-3

    def test_front_value(self):
        p = params(100)
        assert frenning_front_position(p.diffusion_time, p) == pytest.approx(
            FRENNING_FRONT_R100_TAU1, rel=1e-12
        )

    def test_matches_lee(self):
        p = params(100)
        t = np.array([1.0, 4.0, 8.0]) * p.diffusion_time
        lee = lee_release_curve(p, t).cumulative_fraction
        assert np.max(np.abs(frenning_release_fraction(t, p) - lee)) < 0.01

    def test_domain(self):
        p = params(100)
        with pytest.raises(DomainError):
            frenning_front_position(-1.0, p)
        with pytest.raises(DomainError):
            frenning_front_position(2 * frenning_release_time(p), p)


class TestCrank:
    @pytest.mark.parametrize("tau", sorted(CRANK))
    def test_values(self, tau):
        p = params(1)
        assert crank_release_fraction(tau * p.diffusion_time, p) == pytest.approx(CRANK[tau], abs=1e-10)

    def test_reported_value(self):
        p = params(1)
        assert abs(crank_release_fraction(0.05 * p.diffusion_time, p) - 0.6069) <= 5e-4

    def test_limits(self):
        p = params(1)
        assert crank_release_fraction(0.0, p) == 0.0
        assert crank_release_fraction(100 * p.diffusion_time, p) == pytest.approx(1.0, abs=1e-15)

    def test_short_time_form_agrees(self):
        p = params(1)
        for tau in (1e-4, 1e-3, 1e-2, 5e-2):
            t = tau * p.diffusion_time
            assert crank_release_fraction_short_time(t, p) == pytest.approx(
                crank_release_fraction(t, p), abs=1e-9
            )

    def test_cap_error_near_zero(self):
        p = params(1)
        assert SERIES_TERM_CAP == 10_000
        with pytest.raises(ConvergenceError):
            crank_release_fraction(1e-14 * p.diffusion_time, p)

    @given(st.floats(1e-3, 3.0))
    @settings(max_examples=60, deadline=None)
    def test_tolerance_self_consistency(self, tau):
        p = params(1)
        t = tau * p.diffusion_time
        fine = crank_release_fraction(t, p, rel_tol=1e-10)
        coarse = crank_release_fraction(t, p, rel_tol=1e-6)
        assert abs(fine - coarse) < 1e-5


class TestExtendedRelease:
    def test_examples(self):
        p = params(25)
        t_rel = release_time(p)
        assert extended_release(0.0, p) == 0.0
        assert extended_release(2 * t_rel, p) == pytest.approx(1e4)
        assert extended_release(t_rel, p) == pytest.approx(1e4)
        below = np.nextafter(t_rel, 0)
        assert extended_release(below, p, "lee") == pytest.approx(
            1e4 * lee_release_curve(p, np.array([below])).cumulative_fraction[0]
        )

    def test_negative_time_rejected(self):
        with pytest.raises(DomainError):
            extended_release(-1.0, params(25))

    def test_breakpoints(self):
        assert ExtendedRelease(params(25)).breakpoints == (release_time(params(25)),)
        assert ExtendedRelease(params(1), "crank").breakpoints == ()


@pytest.mark.parametrize("model", ["lee", "frenning", "crank"])
@pytest.mark.parametrize("r", RATIOS)
def test_monotone_and_in_range(model, r):
    if model == "crank" and r != 1:
        pytest.skip("series models only the A/Cs = 1 case")
    p = params(r)
    grid = np.linspace(0, 1.2 * release_time(p), 1000)
    frac = ExtendedRelease(p, model).fraction(grid)
    assert frac[0] == 0.0
    assert np.all(np.diff(frac) >= 0)
    assert np.all((frac >= 0) & (frac <= 1 + 1e-9))


@given(st.floats(1.0, 1e4), st.floats(0.0, 1.0))
@settings(max_examples=200, deadline=None)
def test_lee_fraction_range(r, delta):
    value = lee_release_fraction(delta, r)
    assert -1e-12 <= value <= 1 + 1e-12


@given(st.floats(1.0, 1e4))
@settings(max_examples=100, deadline=None)
def test_endpoint_identity_any_ratio(r):
    assert lee_release_fraction(1.0, r) == pytest.approx(1 - 1 / (4 * r), rel=1e-12)


@given(st.floats(25.0, 2000.0))
@settings(max_examples=15, deadline=None)
def test_lee_frenning_agreement(r):
    p = params(r)
    grid = np.linspace(0, release_time(p), 400, endpoint=False)
    lee = lee_release_curve(p, grid).cumulative_fraction
    assert np.max(np.abs(lee - frenning_release_fraction(grid, p))) < 0.02


def test_lee_time_not_monotone_near_full_depth():
    # t(delta) overshoots t_rel just before delta = 1 for A/Cs > 1; the
    # inversion only relies on the branch below t_rel
    p = params(100)
    deltas = np.linspace(0.98, 1.0, 2001)
    times = np.array([lee_time_of_front(d, p) for d in deltas])
    assert times.max() > release_time(p)
    assert math.isclose(times[-1], release_time(p), rel_tol=1e-12)
