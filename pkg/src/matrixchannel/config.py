"""Scenario configuration: YAML with unit-suffixed quantities.

Example::

    matrix:
      loading_ratios: [1, 25, 100, 400]
      radius: 1 um
      diffusivity: 1e-9 m2/s
      molecules: 10000
    geometry:
      distance: 5 um
      rx_radius: 1 um
    models: [point, closed_form, convolution]
    release_model: frenning
    time_grid: {min: 10 us, max: 100 ms, points: 400, spacing: log}
    pbs: {time_step: 1 us, realizations: 100, seed: 0, modes: [matrix]}
    output: channel.csv

Bare numbers are SI. Times also accept ``Dt/a2`` (normalised by
``a^2/D``). Unknown keys are errors and every error carries the line of
the offending entry.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import ChannelGeometry
from .release_models import MatrixParams

MODEL_NAMES = ("lee", "frenning", "crank", "fdm", "pbs", "point", "closed_form", "convolution")
PBS_MODES = ("matrix", "sphere", "point")

UNITS = {
    "length": {"m": 1.0, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9},
    "diffusivity": {"m2/s": 1.0, "um2/s": 1e-12, "µm2/s": 1e-12},
}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(\S*)\s*$")


class ConfigError(ValueError):
    """Invalid configuration; message includes the source line when known."""


@dataclass(frozen=True)
class TimeGrid:
    start: float  # seconds
    stop: float
    points: int
    spacing: str = "log"

    def values(self):
        import numpy as np

        if self.spacing == "log":
            return np.logspace(math.log10(self.start), math.log10(self.stop), self.points)
        return np.linspace(self.start, self.stop, self.points)


@dataclass(frozen=True)
class PbsSettings:
    time_step: float = 1e-6
    realizations: int = 100
    seed: int = 0
    record_stride: int = 1
    modes: tuple[str, ...] = ("matrix",)


@dataclass(frozen=True)
class ScenarioConfig:
    loading_ratios: tuple[float, ...]
    radius: float
    diffusivity: float
    molecules: float
    models: tuple[str, ...]
    time_grid: TimeGrid
    distance: float | None = None
    rx_radius: float | None = None
    release_model: str = "frenning"
    pbs: PbsSettings = field(default_factory=PbsSettings)
    output: str | None = None
    tolerances: dict = field(default_factory=dict)
    criteria: tuple[int, ...] | None = None

    def params(self, ratio: float) -> MatrixParams:
        return MatrixParams.from_ratio(ratio, self.radius, self.diffusivity, self.molecules)

    @property
    def geometry(self) -> ChannelGeometry:
        if self.distance is None or self.rx_radius is None:
            raise ConfigError("geometry section with distance and rx_radius is required")
        return ChannelGeometry(self.radius, self.rx_radius, self.distance)


class _Node:
    """YAML value with its 1-based source line."""

    def __init__(self, value, line):
        self.value = value
        self.line = line


def _wrap(node: yaml.Node):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for key_node, value_node in node.value:
            key = key_node.value
            if key in out:
                raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
            out[key] = _wrap(value_node)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_wrap(v) for v in node.value], line)
    value = yaml.safe_load(yaml.serialize(node))
    return _Node(value, line)


def _fail(node: _Node, msg: str):
    raise ConfigError(f"line {node.line}: {msg}")


def _section(node: _Node, name: str, allowed: set[str]) -> dict:
    if not isinstance(node.value, dict):
        _fail(node, f"{name} must be a mapping")
    for key, child in node.value.items():
        if key not in allowed:
            _fail(child, f"unknown key {name}.{key}; allowed: {sorted(allowed)}")
    return node.value


def parse_quantity(node: _Node, kind: str, *, diffusion_time: float | None = None) -> float:
    """Number in SI, or a string ``'<value> <unit>'``."""
    value = node.value
    if isinstance(value, bool):
        _fail(node, f"expected a {kind}, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        _fail(node, f"expected a {kind}, got {value!r}")
    match = _QUANTITY.match(value)
    if not match:
        _fail(node, f"cannot parse {kind} {value!r}")
    number, unit = float(match.group(1)), match.group(2)
    if not unit:
        return number
    if kind == "time" and unit.lower() == "dt/a2":
        if diffusion_time is None:
            _fail(node, "normalised time needs radius and diffusivity")
        return number * diffusion_time
    scale = UNITS[kind].get(unit)
    if scale is None:
        _fail(node, f"unknown {kind} unit {unit!r}; allowed: {sorted(UNITS[kind])}")
    return number * scale


def _positive(node: _Node, value: float, what: str) -> float:
    if not (value > 0 and math.isfinite(value)):
        _fail(node, f"{what} must be positive and finite")
    return value


def _integer(node: _Node, what: str, minimum: int) -> int:
    if isinstance(node.value, bool) or not isinstance(node.value, int):
        _fail(node, f"{what} must be an integer")
    if node.value < minimum:
        _fail(node, f"{what} must be >= {minimum}")
    return node.value


def _names(node: _Node, allowed, what: str) -> tuple[str, ...]:
    items = node.value if isinstance(node.value, list) else [node]
    out = []
    for item in items:
        if item.value not in allowed:
            _fail(item, f"unknown {what} {item.value!r}; allowed: {list(allowed)}")
        out.append(item.value)
    return tuple(out)


def _require(section: dict, key: str, parent: _Node, name: str) -> _Node:
    if key not in section:
        _fail(parent, f"missing required key {name}.{key}")
    return section[key]


def loads(text: str, *, require_models: bool = True) -> ScenarioConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark else ""
        raise ConfigError(f"{where}YAML syntax error: {getattr(exc, 'problem', exc)}") from exc
    if root is None:
        root_node = _Node({}, 1)
    else:
        root_node = _wrap(root)
    top = _section(
        root_node,
        "config",
        {"matrix", "geometry", "models", "release_model", "time_grid", "pbs", "output", "validate"},
    )

    matrix_node = top.get("matrix", _Node({}, root_node.line))
    matrix = _section(matrix_node, "matrix", {"loading_ratios", "radius", "diffusivity", "molecules"})
    radius = _positive(matrix_node, parse_quantity(matrix["radius"], "length"), "matrix.radius") \
        if "radius" in matrix else 1e-6
    diffusivity = _positive(
        matrix_node, parse_quantity(matrix["diffusivity"], "diffusivity"), "matrix.diffusivity"
    ) if "diffusivity" in matrix else 1e-9
    molecules = 1e4
    if "molecules" in matrix:
        molecules = float(_integer(matrix["molecules"], "matrix.molecules", 0))
    ratios = (1.0,)
    if "loading_ratios" in matrix:
        node = matrix["loading_ratios"]
        items = node.value if isinstance(node.value, list) else [node]
        ratios = []
        for item in items:
            if isinstance(item.value, bool) or not isinstance(item.value, (int, float)):
                _fail(item, "loading ratios must be numbers")
            if not item.value >= 1:
                _fail(item, "loading ratio A/Cs must be >= 1")
            ratios.append(float(item.value))
        if not ratios:
            _fail(node, "at least one loading ratio is required")
        ratios = tuple(ratios)
    diffusion_time = radius**2 / diffusivity

    distance = rx_radius = None
    if "geometry" in top:
        geom = _section(top["geometry"], "geometry", {"distance", "rx_radius"})
        distance = _positive(
            top["geometry"], parse_quantity(_require(geom, "distance", top["geometry"], "geometry"), "length"),
            "geometry.distance",
        )
        rx_radius = _positive(
            top["geometry"], parse_quantity(_require(geom, "rx_radius", top["geometry"], "geometry"), "length"),
            "geometry.rx_radius",
        )
        if distance < radius + rx_radius - 1e-12 * distance:
            _fail(top["geometry"], "transmitter and receiver overlap (distance < radius + rx_radius)")

    models: tuple[str, ...] = ()
    if "models" in top:
        models = _names(top["models"], MODEL_NAMES, "model")
        if not models:
            _fail(top["models"], "at least one model must be selected")
    elif require_models:
        _fail(root_node, "missing required key models")

    release_model = "frenning"
    if "release_model" in top:
        release_model = _names(top["release_model"], ("lee", "frenning", "fdm"), "release model")[0]

    grid = TimeGrid(1e-5, 1e-1, 400, "log")
    if "time_grid" in top:
        node = top["time_grid"]
        spec = _section(node, "time_grid", {"min", "max", "points", "spacing"})
        start = parse_quantity(_require(spec, "min", node, "time_grid"), "time", diffusion_time=diffusion_time)
        stop = parse_quantity(_require(spec, "max", node, "time_grid"), "time", diffusion_time=diffusion_time)
        points = _integer(_require(spec, "points", node, "time_grid"), "time_grid.points", 2)
        spacing = "log"
        if "spacing" in spec:
            spacing = _names(spec["spacing"], ("log", "linear"), "spacing")[0]
        if not stop > start:
            _fail(node, "time_grid.max must exceed time_grid.min")
        if start < 0:
            _fail(node, "time_grid.min must be >= 0")
        if spacing == "log" and start <= 0:
            _fail(node, "log spacing needs time_grid.min > 0")
        grid = TimeGrid(start, stop, points, spacing)

    pbs = PbsSettings()
    if "pbs" in top:
        node = top["pbs"]
        spec = _section(node, "pbs", {"time_step", "realizations", "seed", "record_stride", "modes"})
        kwargs = {}
        if "time_step" in spec:
            kwargs["time_step"] = _positive(spec["time_step"], parse_quantity(spec["time_step"], "time"), "pbs.time_step")
        if "realizations" in spec:
            kwargs["realizations"] = _integer(spec["realizations"], "pbs.realizations", 1)
        if "seed" in spec:
            kwargs["seed"] = _integer(spec["seed"], "pbs.seed", 0)
        if "record_stride" in spec:
            kwargs["record_stride"] = _integer(spec["record_stride"], "pbs.record_stride", 1)
        if "modes" in spec:
            kwargs["modes"] = _names(spec["modes"], PBS_MODES, "pbs mode")
        pbs = PbsSettings(**kwargs)

    output = None
    if "output" in top:
        if not isinstance(top["output"].value, str):
            _fail(top["output"], "output must be a path string")
        output = top["output"].value

    tolerances: dict = {}
    criteria = None
    if "validate" in top:
        node = top["validate"]
        spec = _section(node, "validate", {"criteria", "tolerances"})
        if "criteria" in spec:
            items = spec["criteria"].value if isinstance(spec["criteria"].value, list) else [spec["criteria"]]
            criteria = tuple(_integer(i, "validate.criteria", 1) for i in items)
        if "tolerances" in spec:
            tol_node = spec["tolerances"]
            if not isinstance(tol_node.value, dict):
                _fail(tol_node, "validate.tolerances must be a mapping")
            for key, child in tol_node.value.items():
                if isinstance(child.value, bool) or not isinstance(child.value, (int, float)):
                    _fail(child, f"tolerance {key} must be a number")
                tolerances[key] = float(child.value)

    return ScenarioConfig(
        loading_ratios=ratios,
        radius=radius,
        diffusivity=diffusivity,
        molecules=molecules,
        models=models,
        time_grid=grid,
        distance=distance,
        rx_radius=rx_radius,
        release_model=release_model,
        pbs=pbs,
        output=output,
        tolerances=tolerances,
        criteria=criteria,
    )


def load(path: str | Path, *, require_models: bool = True) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return loads(text, require_models=require_models)
