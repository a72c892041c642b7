"""Flat ``[section]`` / ``key = value`` run configuration.

Every key has a type, a default and a validity check; unknown keys,
malformed values and range violations raise ``ConfigError`` carrying the
source line. ``emit_config`` writes the resolved settings back in the same
format, and ``parse_config(emit_config(s)) == s``.

The full schema is ``SCHEMA`` below; ``python -m tetraloc defaults`` prints it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from .channel import NoiseModel
from .errors import ConfigError, TetralocError
from .estimator import CalibrationTable, EstimatorConfig, ZERO_CALIBRATION
from .geometry import (
    CHANNEL5_CENTER_HZ,
    AntennaArray,
    build_custom,
    build_orthogonal,
    build_rta,
    carrier_wavelength,
    default_spacing,
)
from .protocol import NodeConfig
from .sim import CHANNEL_CAPACITY, DEFAULT_NOISE, Agent, Circular, CurvedForward, ExperimentConfig, Static

DEFAULT_SEED = 20240101


@dataclass(frozen=True)
class Key:
    kind: str                      # float, int, str, floats
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    rule: str = ""
    choices: tuple = ()
    length: Optional[int] = None


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


_node = NodeConfig()
_grid = ExperimentConfig.__dataclass_fields__

SCHEMA: dict[str, Key] = {
    "array.kind": Key("str", "rta", choices=("rta", "orthogonal", "custom")),
    "array.spacing": Key("float", default_spacing(), _pos, "> 0"),
    "array.positions": Key("floats", (), None, length=12),
    "array.frequency_hz": Key("float", CHANNEL5_CENTER_HZ, _pos, "> 0"),
    "noise.phase_sigma0": Key("float", DEFAULT_NOISE.phase_sigma0, _nonneg, ">= 0"),
    "noise.phase_sigma_slope": Key("float", DEFAULT_NOISE.phase_sigma_slope, _nonneg, ">= 0"),
    "noise.range_sigma": Key("float", DEFAULT_NOISE.range_sigma, _nonneg, ">= 0"),
    "noise.clock_drift_ppm": Key("float", DEFAULT_NOISE.clock_drift_ppm, _nonneg, ">= 0"),
    "noise.bias_true": Key("floats", (0.0,) * 6, length=6),
    "noise.sfd_true": Key("floats", (0.0,) * 4, length=4),
    "estimator.mode": Key("str", "paper", choices=("paper", "exact")),
    "estimator.matrix": Key("str", "canonical", choices=("canonical", "paper")),
    "estimator.threshold_deg": Key("float", 165.0, lambda v: 0 < v <= 180, "in (0, 180]"),
    "estimator.calibration_file": Key("str", ""),
    "grid.pan_min": Key("float", _grid["pan_min"].default),
    "grid.pan_max": Key("float", _grid["pan_max"].default),
    "grid.pan_step": Key("float", _grid["pan_step"].default, _pos, "> 0"),
    "grid.tilt_min": Key("float", _grid["tilt_min"].default, lambda v: v >= -90, ">= -90"),
    "grid.tilt_max": Key("float", _grid["tilt_max"].default, lambda v: v <= 90, "<= 90"),
    "grid.tilt_step": Key("float", _grid["tilt_step"].default, _pos, "> 0"),
    "grid.range_min": Key("float", _grid["range_min"].default, _pos, "> 0"),
    "grid.range_max": Key("float", _grid["range_max"].default, _pos, "> 0"),
    "grid.range_step": Key("float", _grid["range_step"].default, _pos, "> 0"),
    "grid.readings_per_cell": Key("int", _grid["readings_per_cell"].default, lambda v: v >= 2, ">= 2"),
    "twr.reply_delay1_us": Key("float", 400.0, _pos, "> 0"),
    "twr.reply_delay2_us": Key("float", 400.0, _pos, "> 0"),
    "protocol.backoff_min": Key("float", _node.backoff_min, _pos, "> 0"),
    "protocol.backoff_max": Key("float", _node.backoff_max, _pos, "> 0"),
    "protocol.t_init": Key("float", _node.t_init, _pos, "> 0"),
    "protocol.t_frame": Key("float", _node.t_frame, _pos, "> 0"),
    "protocol.t_ranging": Key("float", _node.t_ranging, _pos, "> 0"),
    "protocol.t_bearing": Key("float", _node.t_bearing, _pos, "> 0"),
    "protocol.t_compute": Key("float", _node.t_compute, _pos, "> 0"),
    "protocol.timeout": Key("float", _node.timeout, _pos, "> 0"),
    "protocol.turnaround": Key("float", _node.turnaround, _nonneg, ">= 0"),
    "protocol.contention_window": Key("float", _node.contention_window, _nonneg, ">= 0"),
    "protocol.frame_error_rate": Key("float", 0.0, lambda v: 0 <= v <= 1, "in [0, 1]"),
    "trajectory.duration": Key("float", 60.0, _pos, "> 0"),
    "trajectory.rpp_rate": Key("float", 5.0, _pos, "> 0"),
    "trajectory.msg_len": Key("int", 32, _nonneg, ">= 0"),
    "trajectory.lowpass_cutoff_hz": Key("float", 0.5, _pos, "> 0"),
    "trajectory.circle_center": Key("floats", (3.0, 0.0, -1.0), length=3),
    "trajectory.circle_radius": Key("float", 1.0, _pos, "> 0"),
    "trajectory.circle_rate": Key("float", 0.2),
    "trajectory.curve_start": Key("floats", (1.0, 0.0, 2.0), length=3),
    "trajectory.curve_heading_deg": Key("float", 0.0),
    "trajectory.curve_curvature": Key("float", 0.08),
    "trajectory.curve_speed": Key("float", 0.08, _nonneg, ">= 0"),
    "throughput.agents": Key("int", 2, lambda v: v >= 2, ">= 2"),
    "throughput.msg_len": Key("int", 120, _nonneg, ">= 0"),
    "throughput.duration": Key("float", 60.0, _pos, "> 0"),
    "calibrate.samples": Key("int", 500, lambda v: v >= 2, ">= 2"),
    "calibrate.max_elevation_deg": Key("float", 60.0, lambda v: 0 < v <= 90, "in (0, 90]"),
}


def _convert(key: str, spec: Key, raw: str, line: Optional[int]):
    raw = raw.strip()
    try:
        if spec.kind == "float":
            value = float(raw)
            if not np.isfinite(value):
                raise ValueError
        elif spec.kind == "int":
            value = int(raw)
        elif spec.kind == "floats":
            value = tuple(float(x) for x in raw.split(",") if x.strip()) if raw else ()
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {spec.kind}", line, key) from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} not one of {', '.join(spec.choices)}", line, key)
    if spec.kind == "floats" and spec.length and value and len(value) != spec.length:
        raise ConfigError(f"{key}: expected {spec.length} values, got {len(value)}", line, key)
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{key}: {value!r} must be {spec.rule}", line, key)
    return value


def defaults() -> dict[str, Any]:
    return {k: s.default for k, s in SCHEMA.items()}


def parse_config(text: str, overrides: Optional[list[str]] = None) -> "Settings":
    """Parse config text plus ``key=value`` overrides into validated settings.

    An empty text yields all defaults (the standard covariance-map grid).
    """
    values = defaults()
    lines: dict[str, Optional[int]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not any(k.startswith(section + ".") for k in SCHEMA):
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        name, val = (s.strip() for s in line.split("=", 1))
        key = name if "." in name or section is None else f"{section}.{name}"
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        values[key] = _convert(key, SCHEMA[key], val, lineno)
        lines[key] = lineno
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", key=item)
        key, val = (s.strip() for s in item.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", key=key)
        values[key] = _convert(key, SCHEMA[key], val, None)
        lines[key] = None
    settings = Settings(values)
    settings.validate(lines)
    return settings


def emit_config(settings: "Settings | dict") -> str:
    values = settings.values if isinstance(settings, Settings) else settings
    out, section = [], None
    for key, spec in SCHEMA.items():
        sec, name = key.split(".", 1)
        if sec != section:
            if out:
                out.append("")
            out.append(f"[{sec}]")
            section = sec
        v = values[key]
        if spec.kind == "floats":
            text = ", ".join(repr(float(x)) for x in v)
        elif spec.kind == "float":
            text = repr(float(v))
        else:
            text = str(v)
        out.append(f"{name} = {text}")
    return "\n".join(out) + "\n"


class Settings:
    """Resolved configuration with builders for the library objects."""

    def __init__(self, values: dict[str, Any]):
        self.values = dict(values)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, Settings) and self.values == other.values

    def as_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.values.items()}

    def hash(self) -> str:
        blob = json.dumps(self.as_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self, lines: Optional[dict] = None):
        "Cross-key checks; builds every object once so bad combinations fail early."
        lines = lines or {}

        def fail(msg, key):
            raise ConfigError(msg, lines.get(key), key)

        v = self.values
        if v["protocol.backoff_min"] > v["protocol.backoff_max"]:
            fail("protocol.backoff_min must be <= protocol.backoff_max", "protocol.backoff_min")
        if v["array.kind"] == "custom" and len(v["array.positions"]) != 12:
            fail("array.positions needs 12 values for a custom array", "array.positions")
        senders = len(self.agents()) - 1
        if v["trajectory.rpp_rate"] * senders > CHANNEL_CAPACITY + 1e-9:
            fail(f"trajectory.rpp_rate * {senders} senders exceeds channel capacity of {CHANNEL_CAPACITY:g}/s",
                 "trajectory.rpp_rate")
        for name, build in (("array", self.array), ("noise", lambda: self.noise(0)),
                            ("protocol", self.node_config), ("grid", lambda: self.experiment(0))):
            try:
                build()
            except TetralocError as exc:
                key = next((k for k in lines if k.startswith(name + ".")), name)
                fail(str(exc), key)

    # builders -------------------------------------------------------------
    def array(self) -> AntennaArray:
        kind = self["array.kind"]
        if kind == "rta":
            return build_rta(self["array.spacing"])
        if kind == "orthogonal":
            return build_orthogonal(self["array.spacing"])
        return build_custom(np.reshape(self["array.positions"], (4, 3)))

    @property
    def wavelength(self) -> float:
        return carrier_wavelength(self["array.frequency_hz"])

    def noise(self, seed: int) -> NoiseModel:
        return NoiseModel(
            phase_sigma0=self["noise.phase_sigma0"],
            phase_sigma_slope=self["noise.phase_sigma_slope"],
            range_sigma=self["noise.range_sigma"],
            clock_drift_ppm=self["noise.clock_drift_ppm"],
            bias_true=tuple(self["noise.bias_true"]),
            sfd_true=tuple(self["noise.sfd_true"]),
            seed=seed,
        )

    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(self["estimator.mode"], float(np.deg2rad(self["estimator.threshold_deg"])),
                               self["estimator.matrix"], self.wavelength)

    def calibration(self) -> CalibrationTable:
        path = self["estimator.calibration_file"]
        if not path:
            return ZERO_CALIBRATION
        try:
            with open(path) as fh:
                return CalibrationTable.from_text(fh.read())
        except (OSError, TetralocError) as exc:
            raise ConfigError(f"estimator.calibration_file: {exc}", key="estimator.calibration_file") from None

    def node_config(self) -> NodeConfig:
        p = "protocol."
        return NodeConfig(
            backoff_min=self[p + "backoff_min"], backoff_max=self[p + "backoff_max"],
            t_init=self[p + "t_init"], t_frame=self[p + "t_frame"], t_ranging=self[p + "t_ranging"],
            t_bearing=self[p + "t_bearing"], t_compute=self[p + "t_compute"], timeout=self[p + "timeout"],
            turnaround=self[p + "turnaround"], contention_window=self[p + "contention_window"],
        )

    def experiment(self, seed: int, calibration: CalibrationTable = ZERO_CALIBRATION) -> ExperimentConfig:
        g = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("grid.")}
        return ExperimentConfig(
            **g, seed=seed, noise=self.noise(seed), array=self.array(), estimator=self.estimator(),
            calibration=calibration,
            reply_delays=(self["twr.reply_delay1_us"] * 1e-6, self["twr.reply_delay2_us"] * 1e-6),
        )

    def agents(self) -> list[Agent]:
        t = "trajectory."
        return [
            Agent(1, Circular(tuple(self[t + "circle_center"]), self[t + "circle_radius"], self[t + "circle_rate"])),
            Agent(2, CurvedForward(tuple(self[t + "curve_start"]), float(np.deg2rad(self[t + "curve_heading_deg"])),
                                   self[t + "curve_curvature"], self[t + "curve_speed"])),
            Agent(3, Static((0.0, 0.0, 0.0))),
        ]
