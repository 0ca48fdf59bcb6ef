import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from matrixchannel import channel as ch
from matrixchannel.release_models import ExtendedRelease, MatrixParams, release_time

D = 1e-9


def params(ratio=1, molecules=1e4):
    return MatrixParams.from_ratio(ratio, 1e-6, D, molecules)


def geometry(d):
    return ch.ChannelGeometry(1e-6, 1e-6, d)


class TestGeometry:
    def test_touching_allowed(self):
        assert geometry(2e-6).hitting_fraction == pytest.approx(0.5)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            ch.ChannelGeometry(1e-6, 1e-6, 1.5e-6)

    @pytest.mark.parametrize("bad", [(0, 1e-6, 5e-6), (1e-6, -1e-6, 5e-6)])
    def test_nonpositive_radii_rejected(self, bad):
        with pytest.raises(ValueError):
            ch.ChannelGeometry(*bad)


class TestKernel:
    def test_betas(self):
        k = ch.hitting_kernel_params(geometry(5e-6), D)
        assert k.beta1 == pytest.approx(2.25e-3, rel=1e-12)
        assert k.beta2 == pytest.approx(6.25e-3, rel=1e-12)
        assert k.rho == pytest.approx(1 / (4 * math.pi * 1e-12))

    @given(st.floats(1e-7, 1e-5), st.floats(1e-7, 1e-5), st.floats(0.0, 2e-5))
    @settings(max_examples=100, deadline=None)
    def test_betas_match_expanded_forms(self, a, r, gap):
        g = ch.ChannelGeometry(a, r, a + r + gap)
        d = g.distance
        k = ch.hitting_kernel_params(g, D)
        beta1 = ((a + r) * (a + r - 2 * d) + d * d) / (4 * D)
        beta2 = ((a - r) * (a - r + 2 * d) + d * d) / (4 * D)
        scale = d * d / (4 * D)
        assert k.beta1 == pytest.approx(beta1, abs=1e-12 * scale)
        assert k.beta2 == pytest.approx(beta2, rel=1e-12)
        assert k.beta2 >= k.beta1 >= 0

    def test_touching_beta1_zero(self):
        assert ch.hitting_kernel_params(geometry(2e-6), D).beta1 == 0.0

    @pytest.mark.parametrize("d", [2e-6, 5e-6])
    def test_non_negative(self, d):
        t = np.logspace(-9, 1, 2000)
        assert np.all(ch.surface_hitting_density(t, geometry(d), D) >= 0)

    def test_zero_for_non_positive_time(self):
        assert ch.surface_hitting_density(0.0, geometry(5e-6), D) == 0.0
        assert ch.surface_hitting_density(-1.0, geometry(5e-6), D) == 0.0

    @pytest.mark.parametrize("d", [2e-6, 5e-6])
    def test_total_mass(self, d):
        g = geometry(d)
        mass = sum(
            quad(lambda t: ch.surface_hitting_density(t, g, D), lo, hi, limit=400, epsabs=1e-14)[0]
            for lo, hi in ((0, 1e-3), (1e-3, 1.0), (1.0, np.inf))
        )
        assert abs(mass - 1e-6 / d) < 1e-4

    @pytest.mark.parametrize("d", [2e-6, 5e-6])
    def test_cdf_is_integral_of_density(self, d):
        g = geometry(d)
        for t in (1e-4, 3e-3, 0.1):
            integral = quad(lambda u: ch.surface_hitting_density(u, g, D), 0, t, limit=400)[0]
            assert ch.surface_hitting_cdf(t, g, D) == pytest.approx(integral, rel=1e-8, abs=1e-14)


class TestPointBaseline:
    def test_limits(self):
        assert ch.point_hitting_cdf(0.0, geometry(5e-6), D) == 0.0
        assert ch.point_hitting_cdf(1e15, geometry(5e-6), D) == pytest.approx(0.2, rel=1e-6)
        assert ch.point_hitting_cdf(1e15, geometry(2e-6), D) == pytest.approx(0.5, rel=1e-6)
        n = ch.absorbed_point(np.array([1e15]), geometry(5e-6), params()).cumulative_absorbed
        assert n[0] == pytest.approx(2000, rel=1e-6)

    def test_monotone(self):
        t = np.linspace(0, 0.1, 1001)
        assert np.all(np.diff(ch.point_hitting_cdf(t, geometry(5e-6), D)) >= 0)

    def test_density_is_derivative(self):
        g = geometry(5e-6)
        t, h = 3e-3, 1e-8
        numeric = (ch.point_hitting_cdf(t + h, g, D) - ch.point_hitting_cdf(t - h, g, D)) / (2 * h)
        assert ch.point_hitting_density(t, g, D) == pytest.approx(numeric, rel=1e-6)


class TestClosedForm:
    @pytest.mark.parametrize("d", [2e-6, 5e-6])
    def test_matches_convolution(self, d):
        p, g = params(), geometry(d)
        times = np.logspace(-4, -1, 200)
        closed = ch.absorbed_closed_form_instantaneous(times, p, g)
        conv = ch.absorbed_gradual(ExtendedRelease(p, "crank"), g, p, times).cumulative_absorbed
        assert np.max(np.abs(closed - conv) / conv) < 1e-3

    def test_start(self):
        p = params()
        assert ch.absorbed_closed_form_instantaneous(0.0, p, geometry(5e-6)) == 0.0
        for d in (2e-6, 5e-6):
            assert ch.absorbed_closed_form_instantaneous(1e-12, p, geometry(d)) == pytest.approx(0, abs=1e-3)

    def test_saturation(self):
        n = ch.absorbed_closed_form_instantaneous(1e6, params(), geometry(5e-6))
        assert n == pytest.approx(2000, rel=5e-3)

    @pytest.mark.parametrize("d", [2e-6, 5e-6])
    def test_bounded_and_monotone(self, d):
        g = geometry(d)
        times = np.concatenate([[0.0], np.logspace(-9, 3, 400)])
        n = ch.absorbed_closed_form_instantaneous(times, params(), g)
        assert np.all(n >= 0)
        assert np.all(n <= 1e4 * g.hitting_fraction * (1 + 1e-6))
        assert np.all(np.diff(n) >= -1e-9 * n.max())

    def test_large_arguments_finite(self):
        # many terms at early times: the scaled evaluation must not overflow
        times = np.logspace(-8, -5, 20)
        n = ch.absorbed_closed_form_instantaneous(times, params(), geometry(5e-6))
        assert np.all(np.isfinite(n))


class TestConvolution:
    def test_zero_time(self):
        p, g = params(25), geometry(5e-6)
        n = ch.absorbed_gradual(ExtendedRelease(p), g, p, np.array([0.0, 1e-3])).cumulative_absorbed
        assert n[0] == 0.0

    def test_ordering_by_loading_ratio(self):
        g = geometry(5e-6)
        times = np.linspace(0, 0.05, 51)
        curves = [
            ch.absorbed_gradual(ExtendedRelease(params(r)), g, params(r), times).cumulative_absorbed
            for r in (25, 100, 400)
        ]
        for low, high in zip(curves, curves[1:]):
            assert np.all(low[1:] > high[1:])

    def test_linearity(self):
        p, g = params(100), geometry(2e-6)
        rel = ExtendedRelease(p)
        times = np.linspace(0, 0.03, 13)
        base = ch.absorbed_gradual(rel, g, p, times).cumulative_absorbed
        scaled = ch.absorbed_gradual(lambda t: 3.5 * rel(t), g, p, times, breakpoints=rel.breakpoints)
        assert np.allclose(scaled.cumulative_absorbed, 3.5 * base, rtol=1e-5, atol=0)

    @pytest.mark.parametrize("d", [2e-6, 5e-6])
    def test_mass_bound_and_monotone(self, d):
        p, g = params(25), geometry(d)
        rel = ExtendedRelease(p)
        times = np.linspace(0, 0.1, 201)
        n = ch.absorbed_gradual(rel, g, p, times).cumulative_absorbed
        assert np.all(np.diff(n) >= 0)
        assert np.all(n <= rel(times) * g.hitting_fraction * (1 + 1e-6))
        assert np.all(n <= p.total_molecules)

    def test_quadrature_failure(self):
        p, g = params(), geometry(2e-6)
        wild = lambda t: 1e4 * (1 + np.sign(np.sin(2e6 * t)))  # noqa: E731
        with pytest.raises(ch.QuadratureError):
            ch.absorbed_gradual(wild, g, p, np.array([1e-3]), max_panels=8)

    def test_touching_case_runs(self):
        p, g = params(25), geometry(2e-6)
        n = ch.absorbed_gradual(ExtendedRelease(p), g, p, ch.default_time_grid(1e-5, 1e-1, 20))
        assert np.all(np.isfinite(n.cumulative_absorbed))


class TestRate:
    def test_constant_curve(self):
        t = np.linspace(0, 1, 11)
        assert np.all(ch.absorption_rate(ch.AbsorptionCurve(t, np.full(11, 7.0))) == 0)

    def test_non_uniform_rejected(self):
        t = np.array([0.0, 1.0, 3.0])
        with pytest.raises(ValueError):
            ch.absorption_rate(ch.AbsorptionCurve(t, t))

    def test_point_peak_location(self):
        g = geometry(5e-6)
        times = np.linspace(0, 0.02, 2001)
        rate = ch.absorption_rate(ch.absorbed_point(times, g, params()))
        # analytical derivative peaks at (d - r)^2 / (6 D)
        t_star = times[np.argmax(ch.point_hitting_density(times, g, D))]
        assert abs(times[np.argmax(rate)] - t_star) <= times[1] - times[0]
        assert t_star == pytest.approx((4e-6) ** 2 / (6 * D), abs=times[1])

    def test_matrix_rate_spread(self):
        g = geometry(5e-6)
        times = np.linspace(0, 0.1, 2001)
        p400 = params(400)
        rate = ch.absorption_rate(ch.absorbed_gradual(ExtendedRelease(p400), g, p400, times))
        point = ch.absorption_rate(ch.absorbed_point(times, g, params()))
        t_rel = release_time(p400)
        assert t_rel == pytest.approx(6.66e-2, rel=1e-2)
        # still releasing just before t_rel, while a point release has died out
        k = np.searchsorted(times, 0.9 * t_rel)
        assert rate[k] > 0.1 * rate.max()
        assert point[k] < 0.05 * point.max()


@pytest.mark.parametrize("d", [2e-6, 5e-6])
def test_late_time_convergence_across_transmitters(d):
    # all transmitter types for A/Cs = 1 should agree within 1% from ten release times on
    p, g = params(), geometry(d)
    times = 10 * release_time(p) * np.array([1.0, 2.0, 5.0])
    point = ch.absorbed_point(times, g, p).cumulative_absorbed
    sphere = ch.absorbed_closed_form_instantaneous(times, p, g)
    matrix = ch.absorbed_gradual(ExtendedRelease(p, "crank"), g, p, times).cumulative_absorbed
    for a, b in ((point, sphere), (point, matrix), (sphere, matrix)):
        assert np.all(np.abs(a - b) <= 0.01 * np.maximum(a, b))
