"""Release of molecules from a spherical, homogeneous, non-erodible matrix.

Three descriptions of the cumulative released fraction ``M(t)/M_inf`` are
provided:

* the heat-balance-integral approximation of Lee, parametrised by the
  normalised front depth ``delta = 1 - R/a``;
* Frenning's explicit large-loading simplification (cubic-root front);
* Crank's eigenfunction series for a uniformly filled sphere (``A/Cs = 1``).

All times are in seconds, lengths in metres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

SERIES_TERM_CAP = 10_000
_SHORT_TIME_SWITCH = 0.02  # Dt/a^2 below which the erfc form is used internally


class DomainError(ValueError):
    """Argument outside the region where a release formula is defined."""


class ConvergenceError(RuntimeError):
    """An iterative evaluation (root bracketing, series) did not converge."""


@dataclass(frozen=True)
class MatrixParams:
    """Physical description of a spherical matrix carrier.

    Attributes:
        loading: Initial drug loading A [molecules / m^3].
        solubility: Solubility Cs in the dissolution medium [molecules / m^3].
        radius: Matrix radius a [m].
        diffusivity: Diffusion coefficient D [m^2/s].
    """

    loading: float
    solubility: float
    radius: float
    diffusivity: float

    def __post_init__(self):
        if not self.solubility > 0:
            raise ValueError(f"solubility must be positive, got {self.solubility}")
        if not self.loading >= self.solubility:
            raise ValueError(
                f"loading ratio A/Cs must be >= 1, got {self.loading / self.solubility}"
            )
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not self.diffusivity > 0:
            raise ValueError(f"diffusivity must be positive, got {self.diffusivity}")

    @classmethod
    def from_ratio(
        cls,
        loading_ratio: float,
        radius: float,
        diffusivity: float,
        total_molecules: float = 1e4,
    ) -> "MatrixParams":
        """Build parameters from A/Cs and a molecule count; A is back-computed."""
        if loading_ratio < 1:
            raise ValueError(f"loading ratio A/Cs must be >= 1, got {loading_ratio}")
        if radius <= 0:
            raise ValueError(f"radius must be positive, got {radius}")
        loading = total_molecules / (4.0 / 3.0 * math.pi * radius**3)
        return cls(loading, loading / loading_ratio, radius, diffusivity)

    @property
    def loading_ratio(self) -> float:
        return self.loading / self.solubility

    @property
    def total_molecules(self) -> float:
        """M_inf = A (4/3) pi a^3."""
        return self.loading * 4.0 / 3.0 * math.pi * self.radius**3

    @property
    def diffusion_time(self) -> float:
        """a^2 / D, the time unit of the normalised models [s]."""
        return self.radius**2 / self.diffusivity


@dataclass(frozen=True)
class FrontPosition:
    delta: float
    radius: float


@dataclass(frozen=True)
class ReleaseCurve:
    times: np.ndarray
    cumulative_fraction: np.ndarray
    total_molecules: float

    @property
    def cumulative_count(self) -> np.ndarray:
        return self.cumulative_fraction * self.total_molecules


def lee_coefficients(delta, loading_ratio):
    """Profile coefficients ``(a1, a2, a3, lam)`` of the Lee approximation.

    Works elementwise on arrays. The radicand ``lam**2 - 1`` is non-negative
    whenever ``loading_ratio >= 1``; tiny negative rounding is clamped.
    """
    delta = _check_delta(delta)
    lam = 1.0 - (1.0 - loading_ratio) * (1.0 - delta)
    radicand = lam * lam - 1.0
    if np.any(radicand < -1e-12):
        raise DomainError("lambda^2 - 1 < 0: need 0 <= delta <= 1 and A/Cs >= 1")
    a3 = lam - np.sqrt(np.maximum(radicand, 0.0))
    a2 = -a3 - 1.0
    a1 = np.ones_like(a3)
    if a3.ndim == 0:
        return 1.0, float(a2), float(a3), float(lam)
    return a1, a2, a3, lam


def _check_delta(delta):
    delta = np.asarray(delta, dtype=float)
    if np.any(delta < 0) or np.any(delta > 1):
        raise DomainError("front depth delta must lie in [0, 1]")
    return delta


def lee_release_fraction(delta, loading_ratio):
    """Released fraction M(delta)/M_inf of the Lee approximation.

    At ``delta = 1`` this evaluates to ``1 - Cs/(4A)`` rather than 1; the
    deficit is a property of the approximation.
    """
    delta = _check_delta(delta)
    if loading_ratio < 1:
        raise DomainError("A/Cs must be >= 1")
    _, a2, a3, _ = lee_coefficients(delta, loading_ratio)
    inv = 1.0 / loading_ratio
    shell = (1.0 - (1.0 - delta) ** 3) * (1.0 - inv)
    profile = 3.0 * delta * inv * (
        (1.0 + a2 / 2.0 + a3 / 3.0) - (0.5 + a2 / 3.0 + a3 / 4.0) * delta
    )
    out = shell + profile
    return float(out) if np.ndim(out) == 0 else out


def _lee_normalized_time(delta, loading_ratio):
    _, _, a3, _ = lee_coefficients(delta, loading_ratio)
    return (6.0 * loading_ratio - 4.0 - a3) * delta**2 / 12.0 - (
        loading_ratio - 1.0
    ) * delta**3 / 3.0


def lee_time_of_front(delta, params: MatrixParams):
    """Time [s] at which the Lee front has reached normalised depth ``delta``."""
    delta = _check_delta(delta)
    out = params.diffusion_time * _lee_normalized_time(delta, params.loading_ratio)
    return float(out) if np.ndim(out) == 0 else out


def release_time(params: MatrixParams) -> float:
    """t_rel = (a^2/D)(A/(6 Cs) - 1/12): time for the front to reach the centre."""
    return params.diffusion_time * (params.loading_ratio / 6.0 - 1.0 / 12.0)


def check_lee_invertible(loading_ratio: float, points: int = 10_001) -> None:
    """Verify that t(delta) - t has a single root on [0, 1] for every t < t_rel.

    t(delta) overshoots t_rel just before delta = 1 whenever A/Cs > 1 (the
    square root in a3 has unbounded slope there), so it is not monotone on
    the whole interval. Inversion only needs it to be increasing on the
    part of the curve that lies below t_rel, which is what this checks.
    """
    delta = np.linspace(0.0, 1.0, points)
    tau = _lee_normalized_time(delta, loading_ratio)
    tau_rel = loading_ratio / 6.0 - 1.0 / 12.0
    below = tau < tau_rel * (1.0 - 1e-12)
    first_cross = int(np.argmin(below)) if not below.all() else points
    if below[first_cross:].any():
        raise ConvergenceError(
            f"t(delta) re-enters [0, t_rel) after the first crossing (A/Cs={loading_ratio})"
        )
    if np.any(np.diff(tau[:first_cross]) <= 0):
        raise ConvergenceError(
            f"t(delta) is not increasing below t_rel (A/Cs={loading_ratio})"
        )


def lee_front_depth(t, params: MatrixParams, tol: float = 1e-12):
    """Invert the Lee time law: normalised front depth delta at times ``t``.

    Vectorised bisection on [0, 1]. Times at or beyond t_rel map to 1.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("time must be non-negative")
    r = params.loading_ratio
    tau = t / params.diffusion_time
    tau_rel = r / 6.0 - 1.0 / 12.0
    inside = tau < tau_rel
    target = np.where(inside, tau, 0.0)
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    # f(0) = -tau <= 0 and f(1) = tau_rel - tau > 0 bracket the root
    iterations = int(math.ceil(math.log2(1.0 / tol))) + 1
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        below = _lee_normalized_time(mid, r) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    delta = np.where(inside, 0.5 * (lo + hi), 1.0)
    delta = np.where(tau == 0, 0.0, delta)
    return float(delta) if delta.ndim == 0 else delta


def _lee_fraction_of_time(t, params: MatrixParams):
    t = np.asarray(t, dtype=float)
    delta = lee_front_depth(t, params)
    frac = np.asarray(lee_release_fraction(delta, params.loading_ratio), dtype=float)
    return np.where(t >= release_time(params), 1.0, frac)


def lee_release_curve(params: MatrixParams, times) -> ReleaseCurve:
    """Lee release fraction on a time grid, set to exactly 1 from t_rel on."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing")
    check_lee_invertible(params.loading_ratio)
    return ReleaseCurve(times, _lee_fraction_of_time(times, params), params.total_molecules)


def frenning_release_time(params: MatrixParams) -> float:
    """Time at which the arccos argument of the cubic-root front reaches +1.

    This is ``A a^2 / (6 Cs D)``, slightly later than :func:`release_time`.
    """
    return params.diffusion_time * params.loading_ratio / 6.0


def frenning_front_position(t, params: MatrixParams):
    """R(t)/a from the cubic-root solution of the simplified time law.

    Intended for A/Cs >> 1. Defined for ``0 <= t <= A a^2/(6 Cs D)``; the
    arccos argument is clamped within 1e-9 of [-1, 1] and negative radii
    (reached only at the very end) are clamped to 0.
    """
    t = np.asarray(t, dtype=float)
    t_end = frenning_release_time(params)
    if np.any(t < 0) or np.any(t > t_end * (1 + 1e-9)):
        raise DomainError(f"time must lie in [0, {t_end:g}] s")
    c = 1.0 / (3.0 * params.loading_ratio)
    arg = 12.0 * t / (params.loading_ratio * params.diffusion_time) - 1.0
    if np.any(np.abs(arg) > 1 + 1e-9):
        raise DomainError("arccos argument outside [-1, 1]")
    arg = np.clip(arg, -1.0, 1.0)
    ratio = 0.5 * (1.0 - c) + (1.0 + c) * np.cos((np.arccos(arg) + 4.0 * math.pi) / 3.0)
    ratio = np.clip(ratio, 0.0, 1.0)
    return float(ratio) if ratio.ndim == 0 else ratio


def frenning_release_fraction(t, params: MatrixParams):
    """Released fraction of the large-loading simplification."""
    rho = np.asarray(frenning_front_position(t, params))
    inv = 1.0 / params.loading_ratio
    out = 1.0 - rho**3 + 0.5 * inv * (2.0 * rho**3 - rho**2 - rho)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def crank_release_fraction(t, params: MatrixParams, rel_tol: float = 1e-10):
    """Instantaneous release from a uniformly filled sphere (A/Cs = 1).

    ``1 - 6/pi^2 sum_n exp(-D n^2 pi^2 t / a^2) / n^2``, summed until the
    next term drops below ``rel_tol`` times the partial sum. ``t = 0`` is
    returned as 0 without summing.
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("time must be non-negative")
    tau = t.ravel() / params.diffusion_time
    out = np.zeros_like(tau)
    for i, ti in enumerate(tau):
        if ti == 0:
            continue
        out[i] = 1.0 - 6.0 / math.pi**2 * _crank_series_sum(ti, rel_tol)
    out = out.reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def _crank_series_sum(tau: float, rel_tol: float) -> float:
    k = math.pi**2 * tau
    total = 0.0
    for n in range(1, SERIES_TERM_CAP + 1):
        total += math.exp(-k * n * n) / (n * n)
        nxt = math.exp(-k * (n + 1) ** 2) / (n + 1) ** 2
        if nxt <= rel_tol * total:  # '<=' also ends a fully underflowed sum
            return total
    raise ConvergenceError(
        f"series did not converge within {SERIES_TERM_CAP} terms at Dt/a^2={tau:g}"
    )


def crank_release_fraction_short_time(t, params: MatrixParams, terms: int = 8):
    """Short-time form of the uniform-sphere release.

    ``6 sqrt(tau) [1/sqrt(pi) + 2 sum_n ierfc(n/sqrt(tau))] - 3 tau`` with
    ``tau = Dt/a^2``. Equivalent to the eigenseries (Poisson summation) and
    fast for small ``tau``.
    """
    from scipy.special import erfc

    t = np.asarray(t, dtype=float)
    tau = t / params.diffusion_time
    root = np.sqrt(tau)
    acc = np.full_like(tau, 1.0 / math.sqrt(math.pi))
    with np.errstate(divide="ignore", invalid="ignore"):
        for n in range(1, terms + 1):
            x = np.where(root > 0, n / np.where(root > 0, root, 1.0), np.inf)
            ierfc = np.where(
                np.isfinite(x), np.exp(-x * x) / math.sqrt(math.pi) - x * erfc(x), 0.0
            )
            acc = acc + 2.0 * ierfc
    out = 6.0 * root * acc - 3.0 * tau
    return float(out) if out.ndim == 0 else out


def _crank_fraction_fast(t, params: MatrixParams):
    """Vectorised uniform-sphere release: erfc form at short times, series after."""
    t = np.asarray(t, dtype=float)
    tau = np.maximum(t, 0.0) / params.diffusion_time
    out = np.empty_like(tau)
    short = tau < _SHORT_TIME_SWITCH
    if short.any():
        out[short] = crank_release_fraction_short_time(t[short], params)
    if (~short).any():
        # exp(-pi^2 n^2 tau) < 1e-17 for n = 45 at tau = 0.02
        n = np.arange(1, 46, dtype=float)[:, None]
        terms = np.exp(-math.pi**2 * n * n * tau[~short]) / (n * n)
        out[~short] = 1.0 - 6.0 / math.pi**2 * terms.sum(axis=0)
    return np.clip(out, 0.0, 1.0)


RELEASE_MODELS = ("lee", "frenning", "crank")


def release_fraction_function(params: MatrixParams, model: str) -> Callable:
    """Vectorised fraction evaluator ``f(t)`` for ``model``, valid on [0, t_rel)."""
    if model == "lee":
        check_lee_invertible(params.loading_ratio)
        return lambda t: _lee_fraction_of_time(t, params)
    if model == "frenning":
        t_rel = release_time(params)
        return lambda t: frenning_release_fraction(np.minimum(t, t_rel), params)
    if model == "crank":
        return lambda t: _crank_fraction_fast(t, params)
    raise ValueError(f"unknown release model {model!r}; choose from {RELEASE_MODELS}")


class ExtendedRelease:
    """Released molecule count on [0, inf), saturating at M_inf from t_rel.

    ``M(t) (eps(t) - eps(t - t_rel)) + M_inf eps(t - t_rel)`` with the unit
    step ``eps(0) = 1``. The uniform-sphere series already tends to 1 on its
    own and is used unmodified (``t_rel = inf``).

    Instances are callables returning counts; ``breakpoints`` lists the
    jump locations for quadrature.
    """

    def __init__(self, params: MatrixParams, model: str = "frenning"):
        self.params = params
        self.model = model
        self._fraction = release_fraction_function(params, model)
        self.t_rel = math.inf if model == "crank" else release_time(params)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return () if math.isinf(self.t_rel) else (self.t_rel,)

    def fraction(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("time must be non-negative")
        out = np.where(t >= self.t_rel, 1.0, self._fraction(np.minimum(t, self.t_rel)))
        return float(out) if out.ndim == 0 else out

    def __call__(self, t):
        return self.fraction(t) * self.params.total_molecules


def extended_release(t, params: MatrixParams, model: str = "frenning"):
    """Released count M_bar(t) [molecules] for the chosen base model."""
    return ExtendedRelease(params, model)(t)
