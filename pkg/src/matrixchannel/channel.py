"""Channel responses between a spherical transmitter and an absorbing receiver.

Molecules leaving the transmitter surface (radius ``a``) diffuse freely in
unbounded 3D space until they hit a fully absorbing sphere of radius
``r_rx`` whose centre is ``d`` away. The surface-release hitting density is
convolved with a release profile to obtain the expected number of absorbed
molecules ``N(t)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import erfc, erfcx, wofz

from .release_models import SERIES_TERM_CAP, MatrixParams


class QuadratureError(RuntimeError):
    """Convolution quadrature did not reach the required accuracy."""


@dataclass(frozen=True)
class ChannelGeometry:
    """Transmitter radius, receiver radius and centre-to-centre distance [m]."""

    tx_radius: float
    rx_radius: float
    distance: float

    def __post_init__(self):
        if not self.tx_radius > 0 or not self.rx_radius > 0:
            raise ValueError("radii must be positive")
        gap = self.distance - self.tx_radius - self.rx_radius
        if gap < -1e-12 * self.distance:
            raise ValueError(
                f"spheres overlap: d = {self.distance} < a + r_rx = "
                f"{self.tx_radius + self.rx_radius}"
            )

    @property
    def hitting_fraction(self) -> float:
        """Eventual hitting probability r_rx / d of a surface-released molecule."""
        return self.rx_radius / self.distance


@dataclass(frozen=True)
class HittingKernelParams:
    beta1: float
    beta2: float
    rho: float


@dataclass
class AbsorptionCurve:
    times: np.ndarray
    cumulative_absorbed: np.ndarray
    rate: np.ndarray | None = None


def hitting_kernel_params(geom: ChannelGeometry, diffusivity: float) -> HittingKernelParams:
    """beta1, beta2 [s] and rho = 1/(4 pi a^2) of the surface hitting density.

    ``(a+r)(a+r-2d) + d^2`` is evaluated as ``(d-a-r)^2`` (and likewise for
    beta2) so that touching spheres give beta1 = 0 exactly.
    """
    a, r, d = geom.tx_radius, geom.rx_radius, geom.distance
    gap = max(d - a - r, 0.0)
    beta1 = gap * gap / (4.0 * diffusivity)
    beta2 = (d + a - r) ** 2 / (4.0 * diffusivity)
    return HittingKernelParams(beta1, beta2, 1.0 / (4.0 * math.pi * a * a))


def _kernel_prefactor(geom: ChannelGeometry, diffusivity: float) -> float:
    # 2 rho a r / d * sqrt(pi D) with the sqrt(1/t) kept separate
    k = hitting_kernel_params(geom, diffusivity)
    return 2.0 * k.rho * geom.tx_radius * geom.rx_radius / geom.distance * math.sqrt(
        math.pi * diffusivity
    )


def surface_hitting_density(t, geom: ChannelGeometry, diffusivity: float):
    """Hitting rate [1/s] at the receiver for release from the transmitter surface.

    Zero for ``t <= 0``.
    """
    t = np.asarray(t, dtype=float)
    k = hitting_kernel_params(geom, diffusivity)
    pref = _kernel_prefactor(geom, diffusivity)
    pos = t > 0
    safe = np.where(pos, t, 1.0)
    val = pref / np.sqrt(safe) * (np.exp(-k.beta1 / safe) - np.exp(-k.beta2 / safe))
    out = np.where(pos, val, 0.0)
    return float(out) if out.ndim == 0 else out


def _sqrt_t_exp_minus_erfc(beta: float, t: np.ndarray) -> np.ndarray:
    # sqrt(t) e^{-beta/t} - sqrt(pi beta) erfc(sqrt(beta/t)), via erfcx
    x = np.sqrt(beta / t)
    return np.sqrt(t) * np.exp(-x * x) * (1.0 - math.sqrt(math.pi) * x * erfcx(x))


def surface_hitting_cdf(t, geom: ChannelGeometry, diffusivity: float):
    """Probability that a surface-released molecule has been absorbed by ``t``."""
    t = np.asarray(t, dtype=float)
    k = hitting_kernel_params(geom, diffusivity)
    pos = t > 0
    safe = np.where(pos, t, 1.0)
    pref = geom.rx_radius / (geom.tx_radius * geom.distance) * math.sqrt(diffusivity / math.pi)
    val = pref * (
        _sqrt_t_exp_minus_erfc(k.beta1, safe) - _sqrt_t_exp_minus_erfc(k.beta2, safe)
    )
    out = np.where(pos, val, 0.0)
    return float(out) if out.ndim == 0 else out


def point_hitting_cdf(t, geom: ChannelGeometry, diffusivity: float):
    """Hitting probability by ``t`` for a molecule released at the transmitter centre.

    Standard first-passage result ``(r/d) erfc((d - r)/sqrt(4 D t))``; a
    baseline, independent of the transmitter radius.
    """
    t = np.asarray(t, dtype=float)
    r, d = geom.rx_radius, geom.distance
    if not d > r:
        raise ValueError("point transmitter requires d > r_rx")
    pos = t > 0
    safe = np.where(pos, t, 1.0)
    out = np.where(pos, r / d * erfc((d - r) / np.sqrt(4.0 * diffusivity * safe)), 0.0)
    return float(out) if out.ndim == 0 else out


def point_hitting_density(t, geom: ChannelGeometry, diffusivity: float):
    """Time derivative of :func:`point_hitting_cdf`."""
    t = np.asarray(t, dtype=float)
    r, d = geom.rx_radius, geom.distance
    gap = d - r
    pos = t > 0
    safe = np.where(pos, t, 1.0)
    val = r / d * gap / np.sqrt(4.0 * math.pi * diffusivity * safe**3) * np.exp(
        -gap * gap / (4.0 * diffusivity * safe)
    )
    out = np.where(pos, val, 0.0)
    return float(out) if out.ndim == 0 else out


def absorbed_point(times, geom: ChannelGeometry, params: MatrixParams) -> AbsorptionCurve:
    times = np.asarray(times, dtype=float)
    n = params.total_molecules * point_hitting_cdf(times, geom, params.diffusivity)
    return AbsorptionCurve(times, np.asarray(n, dtype=float))


def absorbed_closed_form_instantaneous(
    t, params: MatrixParams, geom: ChannelGeometry, rel_tol: float = 1e-10
):
    """Absorbed count for instantaneous release from a uniformly loaded sphere.

    The response splits into the surface-release term ``M_inf P_s(t)`` minus
    an eigenseries over the decay rates ``g_n = D n^2 pi^2 / a^2``. The decay
    exponent enters the complementary error functions under a square root
    of a negative number; the conjugate pair combines into the imaginary
    part of the Faddeeva function ``w(z) = exp(-z^2) erfc(-iz)``, which is
    bounded in the upper half plane, so no exp(+large) * erfc(large)
    products are formed::

        term_n = 3 M_inf r / (pi^3 n^3 d) * sum_j s_j exp(-b_j/t)
                 * Im w(sqrt(g_n t) + i sqrt(b_j / t)),  s_1 = +1, s_2 = -1

    The series is truncated once the next term falls below ``rel_tol``
    times the partial sum.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    flat = t.ravel()
    out = np.zeros_like(flat)
    pos = flat > 0
    if pos.any():
        tp = flat[pos]
        k = hitting_kernel_params(geom, params.diffusivity)
        head = surface_hitting_cdf(tp, geom, params.diffusivity)
        scale = 3.0 * geom.rx_radius / (math.pi**3 * geom.distance)
        series = _eigen_series(tp, k, params, rel_tol, floor=head / scale)
        out[pos] = params.total_molecules * (head - scale * series)
    cap = params.total_molecules * geom.hitting_fraction * (1 + 1e-6)
    out = np.clip(out, 0.0, cap)
    out = out.reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def _eigen_series(
    t: np.ndarray,
    k: HittingKernelParams,
    params: MatrixParams,
    rel_tol: float,
    floor: np.ndarray | float = 0.0,
):
    # `floor` is the size of the surface term in series units; truncation error is
    # judged against max(|partial|, floor) so near-cancelling sums still terminate.
    root_gt = math.pi * np.sqrt(params.diffusivity * t) / params.radius
    b1 = np.sqrt(k.beta1 / t)
    b2 = np.sqrt(k.beta2 / t)
    e1 = np.exp(-k.beta1 / t)
    e2 = np.exp(-k.beta2 / t)
    total = np.zeros_like(t)
    floor = np.broadcast_to(np.asarray(floor, dtype=float), t.shape)
    done = np.zeros(t.shape, dtype=bool)
    block = 256
    for start in range(1, SERIES_TERM_CAP + 1, block):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        n = np.arange(start, min(start + block, SERIES_TERM_CAP + 1) + 1, dtype=float)
        c = n[:, None] * root_gt[idx][None, :]
        terms = (
            e1[idx] * wofz(c + 1j * b1[idx]).imag - e2[idx] * wofz(c + 1j * b2[idx]).imag
        ) / n[:, None] ** 3
        partial = total[idx][None, :] + np.cumsum(terms[:-1], axis=0)
        ref = np.maximum(np.abs(partial), floor[idx][None, :])
        small = (np.abs(terms[1:]) < rel_tol * ref) | (terms[1:] == 0.0)
        hit = small.any(axis=0)
        first = np.argmax(small, axis=0)
        total[idx] = np.where(hit, partial[first, np.arange(idx.size)], partial[-1])
        done[idx[hit]] = True
    for i in np.flatnonzero(~done):
        # very early times: terms vary on a scale of 1/root_gt >> cap, so the
        # remainder is smooth in n and Euler-Maclaurin closes it accurately
        total[i] += _euler_maclaurin_tail(
            SERIES_TERM_CAP + 1, root_gt[i], b1[i], b2[i], e1[i], e2[i]
        )
    return total


def _euler_maclaurin_tail(first: int, root_gt, b1, b2, e1, e2) -> float:
    def term(n):
        c = n * root_gt
        return (e1 * wofz(c + 1j * b1).imag - e2 * wofz(c + 1j * b2).imag) / n**3

    integral, _ = quad(term, first, np.inf, limit=200, epsabs=0.0, epsrel=1e-12)
    h = 1e-3 * first
    slope = (term(first + h) - term(first - h)) / (2 * h)
    return integral + 0.5 * term(first) - slope / 12.0


def absorbed_closed_form_curve(times, params, geom, rel_tol: float = 1e-10) -> AbsorptionCurve:
    times = np.asarray(times, dtype=float)
    return AbsorptionCurve(
        times, np.asarray(absorbed_closed_form_instantaneous(times, params, geom, rel_tol))
    )


_GL_ORDER = 10
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(_GL_ORDER)


def _panel_rule(panels: int):
    """Composite Gauss-Legendre nodes/weights on [0, 1]."""
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return nodes, weights


def _segments(t: float, breakpoints: Sequence[float]):
    """Split [0, t] at jumps, then halve each piece so both ends get graded."""
    cuts = [0.0] + sorted(b for b in breakpoints if 0.0 < b < t) + [t]
    segs = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        segs.append((lo, mid, True))
        segs.append((mid, hi, False))
    return segs


def _convolve_one(t, release, kernel, pref, segs, panels):
    nodes, weights = _panel_rule(panels)
    total = 0.0
    for lo, hi, at_lo in segs:
        width = hi - lo
        s2 = width * nodes * nodes
        jac = 2.0 * width * nodes
        if at_lo:
            xi = lo + s2
            u = (t - lo) - s2
        else:
            xi = hi - s2
            u = (t - hi) + s2
        kern = pref / np.sqrt(u) * (np.exp(-kernel.beta1 / u) - np.exp(-kernel.beta2 / u))
        total += float(np.sum(weights * jac * kern * release(xi)))
    return total


def absorbed_gradual(
    release: Callable,
    geom: ChannelGeometry,
    params: MatrixParams,
    times,
    *,
    breakpoints: Sequence[float] | None = None,
    rel_tol: float = 1e-5,
    max_panels: int = 4096,
) -> AbsorptionCurve:
    """N(t) = int_0^t p_s(t - xi) M_bar(xi) dxi for a released-count profile.

    Each sub-interval is graded quadratically towards both ends, which
    removes the square-root behaviour of the release at xi = 0 and the
    t^(-1/2) kernel singularity of touching spheres at xi = t. Composite
    10-point Gauss-Legendre panels are doubled until two successive levels
    agree to ``rel_tol``.

    Args:
        release: Vectorised callable returning released molecule counts.
        breakpoints: Jump locations of ``release``; taken from
            ``release.breakpoints`` when omitted.

    Raises:
        QuadratureError: the error estimate exceeds 1e-4 M_inf r_rx / d.
    """
    times = np.asarray(times, dtype=float)
    if breakpoints is None:
        breakpoints = getattr(release, "breakpoints", ())
    kernel = hitting_kernel_params(geom, params.diffusivity)
    pref = _kernel_prefactor(geom, params.diffusivity)
    scale = params.total_molecules * geom.hitting_fraction
    fail_level = 1e-4 * scale
    out = np.zeros_like(times)
    for i, t in enumerate(times):
        if t <= 0:
            continue
        segs = _segments(float(t), breakpoints)
        panels = 4
        coarse = _convolve_one(t, release, kernel, pref, segs, panels)
        while True:
            panels *= 2
            fine = _convolve_one(t, release, kernel, pref, segs, panels)
            err = abs(fine - coarse)
            if err <= rel_tol * abs(fine) or err <= 1e-20 * scale:
                break
            if panels >= max_panels:
                if err > fail_level:
                    raise QuadratureError(
                        f"convolution error estimate {err:.3g} at t={t:g} s exceeds {fail_level:.3g}"
                    )
                break
            coarse = fine
        out[i] = fine
    return AbsorptionCurve(times, out)


def absorption_rate(curve: AbsorptionCurve) -> np.ndarray:
    """dN/dt on a uniform grid: central differences inside, 2nd-order one-sided ends.

    Negative values from differencing are set to zero.
    """
    t = np.asarray(curve.times, dtype=float)
    n = np.asarray(curve.cumulative_absorbed, dtype=float)
    if t.size < 3:
        raise ValueError("absorption rate needs at least 3 samples")
    steps = np.diff(t)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValueError("absorption rate requires a uniform time grid")
    rate = np.gradient(n, steps[0], edge_order=2)
    rate = np.maximum(rate, 0.0)
    curve.rate = rate
    return rate


def default_time_grid(t_min: float = 1e-5, t_max: float = 1e-1, per_decade: int = 400):
    decades = math.log10(t_max / t_min)
    return np.logspace(math.log10(t_min), math.log10(t_max), int(round(decades * per_decade)) + 1)
