"""Finite-difference solution of the spherical moving-boundary release problem.

The dissolved concentration obeys spherical diffusion on the shell
``R(t) < x < a`` with ``C(a) = 0`` (perfect sink), ``C(R) = Cs`` and the
Stefan condition ``D dC/dx|_R = (A - Cs) dR/dt``.

The solver works in normalised units (``x/a``, ``Dt/a^2``, ``C/Cs``) with
``v = x C`` so that the spherical operator becomes ``v_xx``. A Landau
transform ``xi = (x - s)/(1 - s)`` fixes the shell to [0, 1]; diffusion is
stepped with variable-step BDF2 and the front explicitly (Heun) from a second-order
one-sided gradient. Once the front is within ``front_stop_epsilon`` of the
centre, the remaining dissolved mass is released by fixed-domain diffusion
on the whole sphere, evaluated with a sine expansion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from .release_models import MatrixParams, _lee_normalized_time


class RatioTooCloseToOne(ValueError):
    """A/Cs too close to 1: the front moves infinitely fast at t = 0."""


class StabilityFailure(RuntimeError):
    """Mass balance drifted beyond tolerance."""


@dataclass(frozen=True)
class FdmConfig:
    """Controls for :func:`solve_moving_boundary`.

    ``time_step`` is in seconds; ``None`` selects adaptive steps of
    ``stability_factor`` times the front's time scale.
    """

    spatial_nodes: int = 1000
    time_step: float | None = None
    stability_factor: float = 0.01
    front_stop_epsilon: float = 1e-4
    initial_depth: float = 1e-3
    max_steps: int = 1_000_000
    residual_tolerance: float = 1e-3
    sine_modes: int = 400

    def __post_init__(self):
        if self.spatial_nodes < 10:
            raise ValueError("spatial_nodes must be >= 10")
        if self.time_step is not None and not self.time_step > 0:
            raise ValueError("time_step must be positive")
        if not 0 < self.stability_factor <= 1:
            raise ValueError("stability_factor must lie in (0, 1]")
        if not 0 < self.front_stop_epsilon < 1:
            raise ValueError("front_stop_epsilon must lie in (0, 1)")
        if not 0 < self.initial_depth < 1 - self.front_stop_epsilon:
            raise ValueError("initial_depth must lie in (0, 1 - front_stop_epsilon)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class FdmSolution:
    """Front trajectory and cumulative release of a moving-boundary solve.

    ``step_*`` arrays hold every internal step (tracking phase only);
    ``times``, ``front_radius`` and ``cumulative_release_fraction`` are the
    values on the requested output grid.
    """

    params: MatrixParams
    times: np.ndarray
    front_radius: np.ndarray
    cumulative_release_fraction: np.ndarray
    step_times: np.ndarray
    step_front_radius: np.ndarray
    step_release_fraction: np.ndarray
    mass_balance_residual: np.ndarray
    front_stop_time: float
    max_concentration: float
    min_concentration: float
    _tail: tuple = field(repr=False, default=())

    def front_at(self, t):
        """Front radius R(t) [m]; square-root start-up before the seed time, 0 after the stop."""
        return _front_at(self, np.asarray(t, dtype=float))

    def release_at(self, t):
        """Cumulative released fraction at arbitrary times [s]."""
        return _release_at(self, np.asarray(t, dtype=float))


def _tridiag_solve(lower, diag, upper, rhs):
    ab = np.empty((3, diag.size))
    ab[0, 0] = 0.0
    ab[0, 1:] = upper
    ab[1] = diag
    ab[2, :-1] = lower
    ab[2, -1] = 0.0
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def _front_velocity(w, s, length, h, ratio):
    grad = (-3.0 * w[0] + 4.0 * w[1] - w[2]) / (2.0 * h)
    return (grad / length - 1.0) / (s * (ratio - 1.0))


def _operator_bands(length, velocity, xi, h):
    """Interior bands of w_xixi / L^2 + s' (1 - xi)/L w_xi (central differences)."""
    inner = xi[1:-1]
    diff = 1.0 / (length * length * h * h)
    adv = velocity * (1.0 - inner) / (length * 2.0 * h)
    return diff - adv, -2.0 * diff, diff + adv


def _bdf_step(history, s_new, velocity, dtau, omega, xi, h):
    """Implicit step of the front-fixed equation with the front moved to s_new.

    ``history`` holds ``[w_n]`` (backward Euler) or ``[w_n, w_{n-1}]``
    (variable-step BDF2 with step ratio ``omega``).
    """
    lo, di, up = _operator_bands(1.0 - s_new, velocity, xi, h)
    c0, rhs = _bdf_weights(history, omega)
    rhs = rhs[1:-1].copy()
    lower = -dtau * lo
    diag = np.full(xi.size - 2, c0 - dtau * di)
    upper = -dtau * up
    rhs[0] -= lower[0] * s_new
    # w = 0 at the outer boundary contributes nothing
    interior = _tridiag_solve(lower[1:], diag, upper[:-1], rhs)
    out = np.empty_like(history[0])
    out[0] = s_new
    out[1:-1] = interior
    out[-1] = 0.0
    return out


def _bdf_weights(history, omega):
    """Leading coefficient and history combination of (variable-step) BDF2."""
    if len(history) == 1:
        return 1.0, history[0]
    c0 = (1.0 + 2.0 * omega) / (1.0 + omega)
    return c0, (1.0 + omega) * history[0] - omega * omega / (1.0 + omega) * history[1]


def _shell_mass(w, s, length, xi):
    # normalised mass per 4*pi: int_s^1 u x^2 dx = int_0^1 w (s + L xi) L dxi
    return length * trapezoid(w * (s + length * xi), xi)


def _outer_flux(w, length, h):
    # -x^2 u_x at x = 1 equals -v_x(1) because v(1) = 0
    return -(3.0 * w[-1] - 4.0 * w[-2] + w[-3]) / (2.0 * h) / length


def solve_moving_boundary(
    params: MatrixParams, config: FdmConfig = FdmConfig(), times=None
) -> FdmSolution:
    """Integrate the moving-boundary problem and report front and release.

    Args:
        params: Matrix description; requires A/Cs > 1 + 1e-6.
        config: Discretisation controls.
        times: Output grid [s]. Defaults to the internal step times.

    Raises:
        RatioTooCloseToOne: A/Cs < 1 + 1e-6 (use the uniform-sphere series).
        StabilityFailure: relative mass residual above ``residual_tolerance``.
    """
    ratio = params.loading_ratio
    if ratio < 1.0 + 1e-6:
        raise RatioTooCloseToOne(
            f"A/Cs = {ratio} is too close to 1 for front tracking; "
            "use crank_release_fraction for instantaneous release"
        )
    n = config.spatial_nodes
    xi = np.linspace(0.0, 1.0, n)
    h = xi[1] - xi[0]
    total = ratio / 3.0
    s_stop = config.front_stop_epsilon
    fixed_dtau = None if config.time_step is None else config.time_step / params.diffusion_time
    tau_rel = ratio / 6.0 - 1.0 / 12.0
    dtau_max = tau_rel / 500.0
    # the front outruns diffusion when A/Cs -> 1
    factor = config.stability_factor * min(1.0, ratio / 5.0)

    # seed: quasi-steady linear v profile behind a thin dissolved shell
    delta0 = config.initial_depth
    s = 1.0 - delta0
    tau = float(_lee_normalized_time(delta0, ratio))
    w = s * (1.0 - xi)
    released = total - ratio * s**3 / 3.0 - _shell_mass(w, s, 1.0 - s, xi)

    step_tau = [tau]
    step_s = [s]
    step_rel = [released / total]
    residuals = [0.0]
    umax, umin = 1.0, 0.0

    w_prev = None
    released_prev = None
    dtau_prev = None
    for _ in range(config.max_steps):
        length = 1.0 - s
        vel = _front_velocity(w, s, length, h, ratio)
        if fixed_dtau is not None:
            dtau = fixed_dtau
        else:
            dtau = factor * min(length, s) / abs(vel)
            dtau = min(dtau, dtau_max)
            if dtau_prev is not None:
                dtau = min(dtau, 2.0 * dtau_prev)
        # do not overshoot the stopping radius
        if s + dtau * vel < s_stop:
            dtau = (s - s_stop) / abs(vel)
        if w_prev is None:
            history, q_hist, omega = [w], [released], 0.0
        else:
            history, q_hist, omega = [w, w_prev], [released, released_prev], dtau / dtau_prev
        s_pred = s + dtau * vel
        w_pred = _bdf_step(history, s_pred, vel, dtau, omega, xi, h)
        vel_pred = _front_velocity(w_pred, s_pred, 1.0 - s_pred, h, ratio)
        vel_avg = 0.5 * (vel + vel_pred)
        s_new = min(max(s + dtau * vel_avg, s_stop), s)
        w_new = _bdf_step(history, s_new, vel_avg, dtau, omega, xi, h)
        # released mass obeys the same discrete time law as the profile
        c0, q_rhs = _bdf_weights([np.float64(q) for q in q_hist], omega)
        released_new = (q_rhs + dtau * _outer_flux(w_new, 1.0 - s_new, h)) / c0
        w_prev, w = w, w_new
        released_prev, released = released, float(released_new)
        dtau_prev = dtau
        s = s_new
        length = 1.0 - s
        tau += dtau

        x = s + length * xi
        u = np.divide(w, x, out=np.zeros_like(w), where=x > 0)
        umax = max(umax, float(u.max()))
        umin = min(umin, float(u.min()))
        mass = released + ratio * s**3 / 3.0 + _shell_mass(w, s, length, xi)
        residual = (mass - total) / total
        step_tau.append(tau)
        step_s.append(s)
        step_rel.append(released / total)
        residuals.append(residual)
        if abs(residual) > config.residual_tolerance:
            raise StabilityFailure(
                f"mass residual {residual:.3e} exceeds {config.residual_tolerance:g} "
                f"at Dt/a^2 = {tau:.4g}"
            )
        if s <= s_stop * (1 + 1e-12):
            break
    else:
        raise StabilityFailure(f"front did not reach the centre within {config.max_steps} steps")

    tail = _sine_tail(w, s, ratio, xi, config.sine_modes)
    unit = params.diffusion_time
    sol = FdmSolution(
        params=params,
        times=np.empty(0),
        front_radius=np.empty(0),
        cumulative_release_fraction=np.empty(0),
        step_times=np.asarray(step_tau) * unit,
        step_front_radius=np.asarray(step_s) * params.radius,
        step_release_fraction=np.asarray(step_rel),
        mass_balance_residual=np.asarray(residuals),
        front_stop_time=tau * unit,
        max_concentration=umax,
        min_concentration=umin,
        _tail=(tail, released / total, total),
    )
    out_times = sol.step_times if times is None else np.asarray(times, dtype=float)
    sol.times = out_times
    sol.front_radius = sol.front_at(out_times)
    sol.cumulative_release_fraction = sol.release_at(out_times)
    return sol


def _sine_tail(w, s, ratio, xi, modes):
    """Sine coefficients of v on [0, 1] at the moment front tracking stops.

    The residual core (radius s) is dissolved in place at concentration
    A/Cs so that no mass is lost.
    """
    grid = np.linspace(0.0, 1.0, 4 * xi.size + 1)
    x_shell = s + (1.0 - s) * xi
    v = np.where(grid <= s, ratio * grid, np.interp(grid, x_shell, w))
    k = np.arange(1, modes + 1)[:, None] * math.pi
    coeff = 2.0 * trapezoid(v * np.sin(k * grid), grid, axis=1)
    # mass of mode n: int_0^1 x sin(n pi x) dx = (-1)^(n+1)/(n pi)
    weight = coeff * (-1.0) ** (np.arange(modes) % 2) / k[:, 0]
    return k[:, 0] ** 2, weight


def _tail_remaining(tail, dtau):
    decay, weight = tail
    return np.sum(weight[:, None] * np.exp(-np.outer(decay, dtau)), axis=0)


def _release_at(sol: FdmSolution, t):
    flat = np.atleast_1d(t).astype(float)
    t0 = sol.step_times[0]
    f0 = sol.step_release_fraction[0]
    out = np.interp(flat, sol.step_times, sol.step_release_fraction)
    early = flat < t0
    out[early] = f0 * np.sqrt(np.maximum(flat[early], 0.0) / t0)
    late = flat > sol.front_stop_time
    if late.any():
        tail, rel_stop, total = sol._tail
        dtau = (flat[late] - sol.front_stop_time) / sol.params.diffusion_time
        start = _tail_remaining(tail, np.zeros(1))[0]
        out[late] = rel_stop + (start - _tail_remaining(tail, dtau)) / total
    out = np.minimum(out, 1.0 + 1e-9)
    return out.reshape(np.shape(t)) if np.ndim(t) else float(out[0])


def _front_at(sol: FdmSolution, t):
    flat = np.atleast_1d(t).astype(float)
    a = sol.params.radius
    t0 = sol.step_times[0]
    delta0 = 1.0 - sol.step_front_radius[0] / a
    out = np.interp(flat, sol.step_times, sol.step_front_radius)
    early = flat < t0
    out[early] = a * (1.0 - delta0 * np.sqrt(np.maximum(flat[early], 0.0) / t0))
    out[flat >= sol.front_stop_time] = 0.0
    return out.reshape(np.shape(t)) if np.ndim(t) else float(out[0])
