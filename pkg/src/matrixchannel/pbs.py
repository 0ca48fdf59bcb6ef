"""Particle-based simulation of matrix release and of the absorbing channel.

Each molecule starts uniformly inside the transmitter sphere. A molecule
is mobile once the dissolution front has passed it (``|p| >= R(t_k)``).
Mobile molecules take Gaussian steps with per-axis variance ``2 D dt``;
a step that ends inside the undissolved core is rejected and the molecule
stays where it was. A molecule whose end-of-step position satisfies
``|p| >= a`` is counted as released.

In release-only mode released molecules are frozen. In channel mode they
keep diffusing freely (the transmitter does not impede them) and are
absorbed and removed when the end-of-step position lies inside the
receiver sphere.

Realizations use independent ``PCG64`` streams obtained with
``jumped(i + 1)`` from one seed, so they never overlap and results do not
depend on the number of worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .channel import ChannelGeometry
from .release_models import MatrixParams

INSIDE, FREE, ABSORBED = 0, 1, 2
MODES = ("matrix", "sphere", "point")


class PbsConfigError(ValueError):
    """Inconsistent simulation settings."""


@dataclass(frozen=True)
class PbsConfig:
    time_step: float = 1e-6
    max_steps: int | None = None
    molecules_per_run: int = 10_000
    realizations: int = 100
    rng_seed: int = 0
    record_stride: int = 1
    keep_traces: bool = False
    threads: int = 1

    def __post_init__(self):
        if not self.time_step > 0:
            raise PbsConfigError("time_step must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise PbsConfigError("max_steps must be >= 1")
        if self.molecules_per_run < 1:
            raise PbsConfigError("molecules_per_run must be >= 1")
        if self.realizations < 1:
            raise PbsConfigError("realizations must be >= 1")
        if self.record_stride < 1:
            raise PbsConfigError("record_stride must be >= 1")
        if self.threads < 1:
            raise PbsConfigError("threads must be >= 1")


@dataclass
class PbsResult:
    """Counts at recorded times, averaged over realizations.

    ``*_stderr`` is the standard error of the mean across realizations.
    Per-realization traces (``released``, ``absorbed``, ``inside``) are only
    filled when ``PbsConfig.keep_traces`` is set.
    """

    times: np.ndarray
    mean_released: np.ndarray
    mean_absorbed: np.ndarray
    released_stderr: np.ndarray
    absorbed_stderr: np.ndarray
    total_molecules: int
    realizations: int
    first_absorption_time: np.ndarray
    invariant_violations: int
    released: np.ndarray | None = None
    absorbed: np.ndarray | None = None
    inside: np.ndarray | None = None

    @property
    def released_fraction(self) -> np.ndarray:
        return self.mean_released / self.total_molecules

    @property
    def released_fraction_stderr(self) -> np.ndarray:
        return self.released_stderr / self.total_molecules

    @property
    def mean_first_absorption_time(self) -> float:
        hit = np.isfinite(self.first_absorption_time)
        return float(self.first_absorption_time[hit].mean()) if hit.any() else math.inf

    @property
    def earliest_absorption_time(self) -> float:
        """Smallest time at which any realization recorded an absorption."""
        return float(np.min(self.first_absorption_time))


@njit(cache=True)
def _uniform_in_ball(rng, count, radius):
    pos = np.empty((count, 3))
    for i in range(count):
        x = rng.standard_normal()
        y = rng.standard_normal()
        z = rng.standard_normal()
        norm = math.sqrt(x * x + y * y + z * z)
        while norm == 0.0:
            x = rng.standard_normal()
            y = rng.standard_normal()
            z = rng.standard_normal()
            norm = math.sqrt(x * x + y * y + z * z)
        rad = radius * rng.random() ** (1.0 / 3.0)
        pos[i, 0] = rad * x / norm
        pos[i, 1] = rad * y / norm
        pos[i, 2] = rad * z / norm
    return pos


def sample_uniform_in_sphere(rng: np.random.Generator, radius: float, count: int = 1) -> np.ndarray:
    """Positions uniform in a ball: isotropic direction, radius ``a U^(1/3)``."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    return _uniform_in_ball(rng, int(count), float(radius))


@njit(cache=True, nogil=True)
def _realization(
    rng,
    pos,
    state,
    front,
    radius,
    sigma,
    steps,
    stride,
    channel,
    rx_x,
    rx_radius,
):
    """Advance one realization; returns per-record counts and first absorption step.

    ``pos`` must be sorted by decreasing radius so molecules become mobile in
    index order as the front recedes. ``front[k]`` is ``R(t_k)``.
    """
    count = pos.shape[0]
    n_rec = steps // stride + 1
    released = np.zeros(n_rec, np.int64)
    absorbed = np.zeros(n_rec, np.int64)
    inside = np.zeros(n_rec, np.int64)

    # molecules are handled through a compact list of movers
    movers = np.empty(count, np.int64)
    n_movers = 0
    n_released = 0
    n_absorbed = 0
    for i in range(count):
        if state[i] == FREE:
            n_released += 1
            if channel:
                movers[n_movers] = i
                n_movers += 1
    next_inactive = 0
    while next_inactive < count and state[next_inactive] == FREE:
        next_inactive += 1

    rx_r2 = rx_radius * rx_radius
    a2 = radius * radius
    first_hit = -1

    released[0] = n_released
    inside[0] = count - n_released
    for k in range(steps):
        r_front = front[k]
        r2_front = r_front * r_front
        # activate molecules the front has passed
        while next_inactive < count:
            p = pos[next_inactive]
            if state[next_inactive] == INSIDE and p[0] * p[0] + p[1] * p[1] + p[2] * p[2] >= r2_front:
                movers[n_movers] = next_inactive
                n_movers += 1
                next_inactive += 1
            elif state[next_inactive] == FREE:
                next_inactive += 1
            else:
                break
        j = 0
        while j < n_movers:
            m = movers[j]
            x = pos[m, 0] + sigma * rng.standard_normal()
            y = pos[m, 1] + sigma * rng.standard_normal()
            z = pos[m, 2] + sigma * rng.standard_normal()
            r2 = x * x + y * y + z * z
            remove = False
            if state[m] == INSIDE:
                if r2 < r2_front:
                    j += 1
                    continue  # bounced back by the core
                pos[m, 0] = x
                pos[m, 1] = y
                pos[m, 2] = z
                if r2 >= a2:
                    state[m] = FREE
                    n_released += 1
                    if not channel:
                        remove = True
            else:
                pos[m, 0] = x
                pos[m, 1] = y
                pos[m, 2] = z
            if channel and state[m] == FREE:
                dx = x - rx_x
                if dx * dx + y * y + z * z <= rx_r2:
                    state[m] = ABSORBED
                    n_absorbed += 1
                    if first_hit < 0:
                        first_hit = k + 1
                    remove = True
            if remove:
                n_movers -= 1
                movers[j] = movers[n_movers]
            else:
                j += 1
        if (k + 1) % stride == 0:
            rec = (k + 1) // stride
            released[rec] = n_released
            absorbed[rec] = n_absorbed
            n_in = 0
            for i in range(count):
                if state[i] == INSIDE:
                    n_in += 1
            inside[rec] = n_in
    return released, absorbed, inside, first_hit


def _front_table(front: Callable[[np.ndarray], np.ndarray] | None, steps: int, dt: float) -> np.ndarray:
    if front is None:
        return np.zeros(steps + 1)
    values = np.asarray(front(np.arange(steps + 1) * dt), dtype=float)
    values = np.broadcast_to(values, (steps + 1,)).copy()
    # the core never regrows
    return np.clip(np.minimum.accumulate(values), 0.0, None)


def default_front(params: MatrixParams, fdm_config=None) -> Callable[[np.ndarray], np.ndarray] | None:
    """FDM front in metres; ``None`` (no core) when A/Cs is effectively 1."""
    from .fdm import FdmConfig, RatioTooCloseToOne, solve_moving_boundary

    try:
        sol = solve_moving_boundary(params, fdm_config or FdmConfig())
    except RatioTooCloseToOne:
        return None
    return sol.front_at


def _steps_for(horizon: float | None, config: PbsConfig) -> int:
    if config.max_steps is None:
        if horizon is None:
            raise PbsConfigError("either max_steps or a horizon is required")
        return max(1, math.ceil(horizon / config.time_step - 1e-9))
    if horizon is not None and config.max_steps * config.time_step < horizon * (1 - 1e-12):
        raise PbsConfigError(
            f"max_steps * time_step = {config.max_steps * config.time_step:g} s "
            f"is shorter than the requested horizon {horizon:g} s"
        )
    return config.max_steps


def _initial_state(rng, params: MatrixParams, mode: str, count: int):
    if mode == "point":
        pos = np.zeros((count, 3))
        state = np.full(count, FREE, np.int8)
        return pos, state
    pos = _uniform_in_ball(rng, count, params.radius)
    order = np.argsort(-np.einsum("ij,ij->i", pos, pos), kind="stable")
    return np.ascontiguousarray(pos[order]), np.zeros(count, np.int8)


def _run(
    params: MatrixParams,
    front,
    config: PbsConfig,
    horizon: float | None,
    mode: str,
    geom: ChannelGeometry | None,
) -> PbsResult:
    if mode not in MODES:
        raise PbsConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if geom is not None and not math.isclose(geom.tx_radius, params.radius, rel_tol=1e-12):
        raise PbsConfigError("geometry tx_radius differs from matrix radius")
    steps = _steps_for(horizon, config)
    stride = config.record_stride
    table = _front_table(front if mode == "matrix" else None, steps, config.time_step)
    sigma = math.sqrt(2.0 * params.diffusivity * config.time_step)
    channel = geom is not None
    rx_x = geom.distance if channel else 0.0
    rx_r = geom.rx_radius if channel else 0.0
    count = config.molecules_per_run
    base = np.random.PCG64(config.rng_seed)

    def one(i):
        rng = np.random.Generator(base.jumped(i + 1))
        pos, state = _initial_state(rng, params, mode, count)
        return _realization(
            rng, pos, state, table, params.radius, sigma, steps, stride, channel, rx_x, rx_r
        )

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            outputs = list(pool.map(one, range(config.realizations)))
    else:
        outputs = [one(i) for i in range(config.realizations)]

    rel = np.array([o[0] for o in outputs], dtype=float)
    absb = np.array([o[1] for o in outputs], dtype=float)
    ins = np.array([o[2] for o in outputs], dtype=float)
    first = np.array(
        [o[3] * config.time_step if o[3] >= 0 else math.inf for o in outputs]
    )
    violations = int(
        np.sum(np.diff(rel, axis=1) < 0)
        + np.sum(np.diff(absb, axis=1) < 0)
        + np.sum(rel + ins != count)
        + np.sum(absb > rel)
        + np.sum(rel > count)
    )
    n = config.realizations
    ddof = 1 if n > 1 else 0
    se = lambda arr: arr.std(axis=0, ddof=ddof) / math.sqrt(n)  # noqa: E731
    times = np.arange(rel.shape[1]) * stride * config.time_step
    return PbsResult(
        times=times,
        mean_released=rel.mean(axis=0),
        mean_absorbed=absb.mean(axis=0),
        released_stderr=se(rel),
        absorbed_stderr=se(absb),
        total_molecules=count,
        realizations=n,
        first_absorption_time=first,
        invariant_violations=violations,
        released=rel.astype(np.int64) if config.keep_traces else None,
        absorbed=absb.astype(np.int64) if config.keep_traces else None,
        inside=ins.astype(np.int64) if config.keep_traces else None,
    )


def simulate_release(
    params: MatrixParams,
    front: Callable[[np.ndarray], np.ndarray] | None,
    config: PbsConfig,
    horizon: float | None = None,
    mode: str = "matrix",
) -> PbsResult:
    """Release-only simulation; released molecules are frozen.

    ``front`` maps times (s) to core radius (m); ``None`` means no core, so
    every molecule is mobile from the start.
    """
    return _run(params, front, config, horizon, mode, None)


def simulate_channel(
    params: MatrixParams,
    geom: ChannelGeometry,
    front: Callable[[np.ndarray], np.ndarray] | None,
    config: PbsConfig,
    horizon: float | None = None,
    mode: str = "matrix",
) -> PbsResult:
    """Release followed by free diffusion to an absorbing receiver at ``(d, 0, 0)``.

    ``mode='sphere'`` ignores ``front`` (all molecules mobile at t = 0);
    ``mode='point'`` starts every molecule at the centre, already released.
    """
    return _run(params, front, config, horizon, mode, geom)
