"""Command-line runner: ``release``, ``channel``, ``rate`` and ``validate``.

Exit codes: 0 success, 1 validation failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import replace

import numpy as np

from . import acceptance
from . import channel as ch
from . import pbs
from .config import ConfigError, ScenarioConfig, load
from .fdm import RatioTooCloseToOne, solve_moving_boundary
from .release_models import (
    ExtendedRelease,
    MatrixParams,
    crank_release_fraction,
    lee_release_curve,
)

RELEASE_MODELS = ("lee", "frenning", "crank", "fdm", "pbs")
CHANNEL_MODELS = ("point", "closed_form", "convolution", "pbs")


class FdmRelease:
    """Released count from an FDM solution, usable by ``absorbed_gradual``."""

    def __init__(self, params: MatrixParams):
        self.params = params
        self.solution = solve_moving_boundary(params)
        self.breakpoints = (self.solution.front_stop_time,)

    def fraction(self, t):
        return self.solution.release_at(t)

    def __call__(self, t):
        return self.fraction(t) * self.params.total_molecules


def _ratio_tag(ratio: float) -> str:
    return f"r{ratio:g}"


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_csv(columns: dict[str, np.ndarray], path: str | None):
    names = list(columns)
    rows = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        with open(path, "w", newline="") as fh:
            fh.write(buf.getvalue())


def _check_models(cfg: ScenarioConfig, allowed, command: str):
    bad = [m for m in cfg.models if m not in allowed]
    if bad:
        raise ConfigError(f"models {bad} are not available for '{command}'; choose from {list(allowed)}")


def _params(cfg: ScenarioConfig, ratio: float) -> tuple[MatrixParams, float]:
    """Parameters and a count scale (lets a zero-molecule scenario run)."""
    count = max(cfg.molecules, 1.0)
    return MatrixParams.from_ratio(ratio, cfg.radius, cfg.diffusivity, count), cfg.molecules / count


def _pbs_config(cfg: ScenarioConfig, molecules: int, threads: int) -> pbs.PbsConfig:
    s = cfg.pbs
    return pbs.PbsConfig(
        time_step=s.time_step,
        molecules_per_run=molecules,
        realizations=s.realizations,
        rng_seed=s.seed,
        record_stride=s.record_stride,
        threads=threads,
    )


def _front(params: MatrixParams):
    if params.loading_ratio < 1 + 1e-6:
        return None
    try:
        return solve_moving_boundary(params).front_at
    except RatioTooCloseToOne:
        return None


def run_release(cfg: ScenarioConfig, threads: int = 1) -> dict[str, np.ndarray]:
    _check_models(cfg, RELEASE_MODELS, "release")
    times = cfg.time_grid.values()
    diffusion_time = cfg.radius**2 / cfg.diffusivity
    cols = {"normalized_time": times / diffusion_time, "time_s": times}
    for ratio in cfg.loading_ratios:
        p, _ = _params(cfg, ratio)
        tag = _ratio_tag(ratio)
        for model in cfg.models:
            if model == "lee":
                cols[f"fraction_lee_{tag}"] = lee_release_curve(p, times).cumulative_fraction
            elif model == "frenning":
                cols[f"fraction_frenning_{tag}"] = ExtendedRelease(p, "frenning").fraction(times)
            elif model == "crank":
                cols[f"fraction_crank_{tag}"] = np.array([crank_release_fraction(t, p) for t in times])
            elif model == "fdm":
                if ratio < 1 + 1e-6:
                    raise ConfigError("fdm needs A/Cs > 1; use crank for A/Cs = 1")
                cols[f"fraction_fdm_{tag}"] = solve_moving_boundary(p).release_at(times)
            elif model == "pbs":
                molecules = max(int(round(cfg.molecules)), 1)
                res = pbs.simulate_release(
                    p, _front(p), _pbs_config(cfg, molecules, threads), horizon=float(times[-1])
                )
                cols[f"fraction_pbs_{tag}"] = np.interp(times, res.times, res.released_fraction)
                cols[f"stderr_pbs_{tag}"] = np.interp(times, res.times, res.released_fraction_stderr)
    return cols


def _channel_curves(cfg: ScenarioConfig, times: np.ndarray, threads: int):
    geom = cfg.geometry
    curves: dict[str, np.ndarray] = {}
    errors: dict[str, np.ndarray] = {}
    p1, scale = _params(cfg, 1.0)
    for model in cfg.models:
        if model == "point":
            curves["N_point"] = scale * ch.absorbed_point(times, geom, p1).cumulative_absorbed
        elif model == "closed_form":
            curves["N_sphere_closed_form"] = scale * np.asarray(
                ch.absorbed_closed_form_instantaneous(times, p1, geom)
            )
        elif model == "convolution":
            for ratio in cfg.loading_ratios:
                p, scale_r = _params(cfg, ratio)
                if ratio < 1 + 1e-6:
                    release = ExtendedRelease(p, "crank")
                elif cfg.release_model == "fdm":
                    release = FdmRelease(p)
                else:
                    release = ExtendedRelease(p, cfg.release_model)
                curve = ch.absorbed_gradual(release, geom, p, times)
                curves[f"N_matrix_{_ratio_tag(ratio)}"] = scale_r * curve.cumulative_absorbed
        elif model == "pbs":
            molecules = int(round(cfg.molecules))
            for mode in cfg.pbs.modes:
                runs = cfg.loading_ratios if mode == "matrix" else (None,)
                for ratio in runs:
                    name = f"pbs_{mode}" + (f"_{_ratio_tag(ratio)}" if ratio is not None else "")
                    if molecules == 0:
                        curves[f"N_{name}"] = np.zeros_like(times)
                        errors[f"stderr_{name}"] = np.zeros_like(times)
                        continue
                    p, _ = _params(cfg, ratio if ratio is not None else 1.0)
                    res = pbs.simulate_channel(
                        p, geom, _front(p) if mode == "matrix" else None,
                        _pbs_config(cfg, molecules, threads), horizon=float(times[-1]), mode=mode,
                    )
                    curves[f"N_{name}"] = np.interp(times, res.times, res.mean_absorbed)
                    errors[f"stderr_{name}"] = np.interp(times, res.times, res.absorbed_stderr)
    return curves, errors


def run_channel(cfg: ScenarioConfig, threads: int = 1) -> dict[str, np.ndarray]:
    _check_models(cfg, CHANNEL_MODELS, "channel")
    times = cfg.time_grid.values()
    curves, errors = _channel_curves(cfg, times, threads)
    cols = {"time_s": times, "normalized_time": times * cfg.diffusivity / cfg.radius**2}
    cols.update(curves)
    cols.update(errors)
    return cols


def run_rate(cfg: ScenarioConfig, threads: int = 1) -> dict[str, np.ndarray]:
    _check_models(cfg, CHANNEL_MODELS, "rate")
    if cfg.time_grid.spacing != "linear":
        raise ConfigError("rate needs a uniform time grid (time_grid.spacing: linear)")
    times = cfg.time_grid.values()
    curves, _ = _channel_curves(cfg, times, threads)
    cols = {"time_s": times, "normalized_time": times * cfg.diffusivity / cfg.radius**2}
    for name, values in curves.items():
        rate = ch.absorption_rate(ch.AbsorptionCurve(times, values))
        cols["rate_" + name[2:]] = rate
    return cols


def run_validate(cfg: ScenarioConfig | None, seed: int, out=None) -> int:
    out = out or sys.stdout
    ids = cfg.criteria if cfg and cfg.criteria else None
    tolerances = cfg.tolerances if cfg else None
    try:
        results = acceptance.run_all(ids, tolerances, seed)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    out.write("id,status,seconds,name,detail\n")
    for r in results:
        detail = r.detail.replace(",", ";")
        out.write(f"{r.id},{'PASS' if r.passed else 'FAIL'},{r.seconds:.2f},{r.name},{detail}\n")
    out.flush()
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matrixchannel",
        description="Release from spherical matrix carriers and absorbing-receiver channel responses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("release", "normalised release curves"),
        ("channel", "absorbed-molecule counts at the receiver"),
        ("rate", "absorption rates on a uniform grid"),
        ("validate", "run the acceptance checks"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name != "validate", help="YAML scenario file")
        p.add_argument("--output", help="CSV path (default: config output or stdout)")
        p.add_argument("--seed", type=int, help="override pbs.seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads for PBS realizations")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = None
        if args.config:
            cfg = load(args.config, require_models=args.command != "validate")
            if args.seed is not None:
                cfg = replace(cfg, pbs=replace(cfg.pbs, seed=args.seed))
        if args.command == "validate":
            return run_validate(cfg, args.seed or 0)
        runner = {"release": run_release, "channel": run_channel, "rate": run_rate}[args.command]
        cols = runner(cfg, args.threads)
    except ValueError as exc:  # ConfigError, PbsConfigError, parameter checks
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    _write_csv(cols, args.output or cfg.output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
