"""End-to-end acceptance checks at the reference parameter set.

Reference set: a = r_RX = 1 um, D = 1e-9 m^2/s, M_inf = 1e4,
d in {2, 5} um, A/Cs in {1, 25, 100, 400}, dt = 1 us, 100 realizations.

Each check returns a :class:`CriterionResult`. Tolerances can be overridden
by key (see ``DEFAULT_TOLERANCES``) so that a deliberately corrupted
tolerance can be shown to fail.
"""
from __future__ import annotations

import filecmp
import math
import tempfile
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from . import channel as ch
from . import pbs
from .fdm import solve_moving_boundary
from .release_models import (
    ExtendedRelease,
    MatrixParams,
    crank_release_fraction,
    frenning_release_fraction,
    lee_release_curve,
    lee_release_fraction,
    lee_time_of_front,
    release_time,
)

RADIUS = 1e-6
RX_RADIUS = 1e-6
DIFFUSIVITY = 1e-9
MOLECULES = 1e4
DISTANCES = (2e-6, 5e-6)
RATIOS = (1, 25, 100, 400)

DEFAULT_TOLERANCES = {
    "lee_endpoint_rel": 1e-12,
    "release_time_rel": 1e-12,
    "model_agreement_abs": 0.02,
    "pbs_sigma": 3.0,
    "fdm_runtime_s": 30.0,
    "pbs_runtime_s": 300.0,
    "crank_target": 0.6069,
    "crank_abs": 5e-4,
    "kernel_mass_abs": 1e-4,
    "closed_form_rel": 1e-3,
    "closed_form_runtime_s": 30.0,
    "saturation_rel": 0.01,
    "rate_rel": 0.05,
    "rate_floor": 0.1,
    "support_rel": 0.30,
}


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"criterion {self.id:2d} {status} {self.name}: {self.detail} [{self.seconds:.1f} s]"


def reference_params(ratio: float) -> MatrixParams:
    return MatrixParams.from_ratio(ratio, RADIUS, DIFFUSIVITY, MOLECULES)


def reference_geometry(distance: float) -> ch.ChannelGeometry:
    return ch.ChannelGeometry(RADIUS, RX_RADIUS, distance)


@lru_cache(maxsize=None)
def _fdm(ratio: float):
    start = time.perf_counter()
    sol = solve_moving_boundary(reference_params(ratio))
    return sol, time.perf_counter() - start


@lru_cache(maxsize=None)
def _pbs_release(ratio: float, seed: int):
    params = reference_params(ratio)
    front = _fdm(ratio)[0].front_at if ratio > 1 else None
    horizon = release_time(params) if ratio > 1 else 0.5 * params.diffusion_time
    start = time.perf_counter()
    result = pbs.simulate_release(params, front, pbs.PbsConfig(rng_seed=seed), horizon=horizon)
    return result, time.perf_counter() - start


@lru_cache(maxsize=None)
def _pbs_channel(distance: float, mode: str, seed: int):
    params = reference_params(1)
    horizon = 10 * release_time(params)
    return pbs.simulate_channel(
        params, reference_geometry(distance), None, pbs.PbsConfig(rng_seed=seed),
        horizon=horizon, mode=mode,
    )


def _z_scores(result: pbs.PbsResult, checkpoints, reference):
    mean = np.interp(checkpoints, result.times, result.released_fraction)
    se = np.interp(checkpoints, result.times, result.released_fraction_stderr)
    diff = mean - reference
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(diff) / se, np.where(diff == 0, 0.0, np.inf))
    return z, diff


def criterion_1(tol) -> CriterionResult:
    worst = 0.0
    for r in RATIOS:
        exact = 1 - 1 / (4 * r)
        worst = max(worst, abs(lee_release_fraction(1.0, r) - exact) / exact)
    return CriterionResult(
        1, "Lee endpoint identity", worst <= tol["lee_endpoint_rel"], f"max rel err {worst:.2e}"
    )


def criterion_2(tol) -> CriterionResult:
    worst = 0.0
    for r in RATIOS:
        p = reference_params(r)
        exact = p.diffusion_time * (r / 6 - 1 / 12)
        worst = max(worst, abs(lee_time_of_front(1.0, p) - exact) / exact)
    return CriterionResult(
        2, "release-time consistency", worst <= tol["release_time_rel"], f"max rel err {worst:.2e}"
    )


def criterion_3(tol, seed: int = 0) -> CriterionResult:
    parts, ok = [], True
    for r in (25, 100, 400):
        p = reference_params(r)
        t_rel = release_time(p)
        grid = np.linspace(0.0, t_rel, 1000)
        sol, fdm_seconds = _fdm(r)
        curves = {
            "lee": lee_release_curve(p, grid).cumulative_fraction,
            "frenning": frenning_release_fraction(grid, p),
            "fdm": sol.release_at(grid),
        }
        names = list(curves)
        dev = max(
            np.max(np.abs(curves[x] - curves[y])) for i, x in enumerate(names) for y in names[i + 1:]
        )
        res, pbs_seconds = _pbs_release(r, seed)
        checkpoints = t_rel * np.arange(1, 21) / 21
        z, _ = _z_scores(res, checkpoints, lee_release_curve(p, checkpoints).cumulative_fraction)
        good = (
            dev < tol["model_agreement_abs"]
            and np.max(z) <= tol["pbs_sigma"]
            and fdm_seconds < tol["fdm_runtime_s"]
            and pbs_seconds < tol["pbs_runtime_s"]
        )
        ok &= bool(good)
        parts.append(
            f"A/Cs={r}: dev {dev:.1e}, PBS max|z| {np.max(z):.1f}, fdm {fdm_seconds:.1f}s, pbs {pbs_seconds:.0f}s"
        )
    return CriterionResult(3, "release model cross-agreement", ok, "; ".join(parts))


def criterion_4(tol, seed: int = 0) -> CriterionResult:
    p = reference_params(1)
    value = crank_release_fraction(0.05 * p.diffusion_time, p)
    value_ok = abs(value - tol["crank_target"]) <= tol["crank_abs"]
    res, _ = _pbs_release(1, seed)
    checkpoints = p.diffusion_time * 0.025 * np.arange(1, 21)
    reference = np.array([crank_release_fraction(t, p) for t in checkpoints])
    z, diff = _z_scores(res, checkpoints, reference)
    ok = value_ok and np.max(z) <= tol["pbs_sigma"]
    return CriterionResult(
        4, "instantaneous-release series", bool(ok),
        f"series(0.05) = {value:.6f}; PBS max|z| {np.max(z):.1f}, max|diff| {np.max(np.abs(diff)):.3f}",
    )


def kernel_mass(distance: float) -> float:
    """Numerical integral of the surface hitting density over (0, inf)."""
    geom = reference_geometry(distance)
    k = ch.hitting_kernel_params(geom, DIFFUSIVITY)
    scale = max(k.beta2, 1e-12)
    f = lambda u: ch.surface_hitting_density(u * scale, geom, DIFFUSIVITY) * scale  # noqa: E731
    head, _ = quad(f, 0.0, 1.0, limit=400, epsabs=1e-13)
    tail, _ = quad(f, 1.0, np.inf, limit=400, epsabs=1e-13)
    return head + tail


def criterion_5(tol) -> CriterionResult:
    parts, ok = [], True
    for d in DISTANCES:
        mass = kernel_mass(d)
        err = abs(mass - RX_RADIUS / d)
        ok &= err <= tol["kernel_mass_abs"]
        parts.append(f"d={d * 1e6:g}um: {mass:.8f} (err {err:.1e})")
    return CriterionResult(5, "kernel mass", bool(ok), "; ".join(parts))


def criterion_6(tol) -> CriterionResult:
    p = reference_params(1)
    times = np.logspace(-4, -1, 200)
    parts, ok = [], True
    start = time.perf_counter()
    for d in DISTANCES:
        g = reference_geometry(d)
        closed = ch.absorbed_closed_form_instantaneous(times, p, g)
        conv = ch.absorbed_gradual(ExtendedRelease(p, "crank"), g, p, times).cumulative_absorbed
        rel = np.max(np.abs(closed - conv) / np.abs(conv))
        ok &= rel < tol["closed_form_rel"]
        parts.append(f"d={d * 1e6:g}um: max rel {rel:.1e}")
    seconds = time.perf_counter() - start
    ok &= seconds < tol["closed_form_runtime_s"]
    return CriterionResult(6, "closed form vs convolution", bool(ok), "; ".join(parts), seconds)


def matrix_channel_response(ratio: float, geom: ch.ChannelGeometry, times, model: str = "frenning"):
    """Expected absorbed count; A/Cs = 1 uses the closed form."""
    p = reference_params(ratio)
    if ratio == 1:
        return np.asarray(ch.absorbed_closed_form_instantaneous(times, p, geom))
    return ch.absorbed_gradual(ExtendedRelease(p, model), geom, p, times).cumulative_absorbed


def _first_arrival(result: pbs.PbsResult) -> float:
    reached = np.flatnonzero(result.mean_absorbed >= 1.0)
    return float(result.times[reached[0]]) if reached.size else math.inf


def criterion_7(tol, seed: int = 0) -> CriterionResult:
    g = reference_geometry(5e-6)
    t = np.array([0.0, 1e-3])
    counts = [matrix_channel_response(r, g, t)[-1] for r in RATIOS]
    ordered = all(a > b for a, b in zip(counts, counts[1:]))
    parts = ["N(1ms) = " + ", ".join(f"{c:.2f}" for c in counts)]
    ok = ordered
    for d in DISTANCES:
        t_point = _first_arrival(_pbs_channel(d, "point", seed))
        t_sphere = _first_arrival(_pbs_channel(d, "sphere", seed))
        ok &= t_point > t_sphere
        parts.append(f"d={d * 1e6:g}um first arrival point {t_point:.2e}s vs sphere {t_sphere:.2e}s")
    return CriterionResult(7, "channel ordering", bool(ok), "; ".join(parts))


def criterion_8(tol, seed: int = 0) -> CriterionResult:
    p = reference_params(1)
    t_check = 10 * release_time(p)
    parts, ok = [], True
    for d in DISTANCES:
        g = reference_geometry(d)
        target = MOLECULES * RX_RADIUS / d
        analytic = float(ch.absorbed_closed_form_instantaneous(t_check, p, g))
        res = _pbs_channel(d, "sphere", seed)
        k = int(np.argmin(np.abs(res.times - t_check)))
        sim, se = res.mean_absorbed[k], res.absorbed_stderr[k]
        good = abs(analytic - target) <= tol["saturation_rel"] * target and abs(sim - target) <= tol["pbs_sigma"] * se
        ok &= good
        parts.append(f"d={d * 1e6:g}um target {target:.0f}: analytic {analytic:.1f}, PBS {sim:.1f}+-{se:.1f}")
    return CriterionResult(8, "saturation limits", bool(ok), "; ".join(parts))


def _support(times, rate, floor):
    above = times[rate >= floor * rate.max()]
    return above[-1] - above[0]


def criterion_9(tol) -> CriterionResult:
    g = reference_geometry(5e-6)
    p1 = reference_params(1)
    times = np.linspace(0.0, 0.2, 4001)
    point = ch.absorption_rate(ch.absorbed_point(times, g, p1))
    sphere = ch.absorption_rate(ch.AbsorptionCurve(times, ch.absorbed_closed_form_instantaneous(times, p1, g)))
    matrix1 = ch.absorption_rate(
        ch.absorbed_gradual(ExtendedRelease(p1, "crank"), g, p1, times)
    )
    worst = 0.0
    for a, b in ((point, sphere), (point, matrix1), (sphere, matrix1)):
        mask = (a >= tol["rate_floor"] * a.max()) | (b >= tol["rate_floor"] * b.max())
        worst = max(worst, np.max(np.abs(a[mask] - b[mask]) / np.maximum(a[mask], b[mask])))
    shape_ok = worst < tol["rate_rel"]

    widths = {}
    for r in (25, 400):
        rate = ch.absorption_rate(
            ch.absorbed_gradual(ExtendedRelease(reference_params(r)), g, reference_params(r), times)
        )
        widths[r] = _support(times, rate, tol["rate_floor"])
    expected = release_time(reference_params(400)) / release_time(reference_params(25))
    ratio = widths[400] / widths[25]
    spread_ok = widths[400] > widths[25] and abs(ratio / expected - 1) <= tol["support_rel"]
    return CriterionResult(
        9, "rate spreading", bool(shape_ok and spread_ok),
        f"TX-type max rel diff {worst:.3f}; support ratio 400/25 = {ratio:.2f} vs t_rel ratio {expected:.2f}",
    )


REPRO_CONFIG = """\
matrix: {loading_ratios: [25], radius: 1 um, diffusivity: 1e-9 m2/s, molecules: 10000}
geometry: {distance: 5 um, rx_radius: 1 um}
models: [lee, frenning, pbs]
time_grid: {min: 0 Dt/a2, max: 4 Dt/a2, points: 41, spacing: linear}
pbs: {time_step: 1 us, realizations: 100, seed: 7}
"""


def criterion_10(tol, seed: int = 0) -> CriterionResult:
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "repro.yaml"
        cfg.write_text(REPRO_CONFIG)
        outs = [Path(tmp) / f"run{i}.csv" for i in range(2)]
        codes = [main(["release", "--config", str(cfg), "--output", str(o)]) for o in outs]
        identical = all(c == 0 for c in codes) and filecmp.cmp(outs[0], outs[1], shallow=False)
    # counters of every recorded step of every realization, in all run modes
    p = reference_params(25)
    matrix_run = pbs.simulate_channel(
        p, reference_geometry(2e-6), _fdm(25)[0].front_at, pbs.PbsConfig(rng_seed=seed),
        horizon=10 * release_time(reference_params(1)),
    )
    runs = [matrix_run, _pbs_release(25, seed)[0], _pbs_release(1, seed)[0]]
    runs += [_pbs_channel(d, m, seed) for d in DISTANCES for m in ("point", "sphere")]
    violations = sum(r.invariant_violations for r in runs)
    return CriterionResult(
        10, "stochastic reproducibility", bool(identical and violations == 0),
        f"byte-identical CSVs: {identical}; invariant violations: {violations}",
    )


CRITERIA = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10,
}
_SEEDED = {3, 4, 7, 8, 10}


def run_criterion(cid: int, tolerances: dict | None = None, seed: int = 0) -> CriterionResult:
    tol = {**DEFAULT_TOLERANCES, **(tolerances or {})}
    unknown = set(tolerances or {}) - set(DEFAULT_TOLERANCES)
    if unknown:
        raise KeyError(f"unknown tolerance keys: {sorted(unknown)}")
    start = time.perf_counter()
    fn = CRITERIA[cid]
    result = fn(tol, seed) if cid in _SEEDED else fn(tol)
    if not result.seconds:
        result.seconds = time.perf_counter() - start
    return result


def run_all(ids=None, tolerances=None, seed: int = 0):
    return [run_criterion(i, tolerances, seed) for i in (ids or sorted(CRITERIA))]
