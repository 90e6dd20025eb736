"""Scenario files: TOML with units spelled out in every key name."""

from __future__ import annotations

import math
import sys
from decimal import Decimal
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .circuit import ConverterParams, MfcsState
from .controllers import Constraints, CostWeights
from .metrics import MetricsReport
from .simulator import ConstantLoad, Leg, LoadProfile, PiecewiseConstantLoad, SimConfig, SineLoad
from .stack import StackParams

__all__ = [
    "ConfigError",
    "ControllerSpec",
    "ExcitationSpec",
    "MetricSpec",
    "Scenario",
    "scenario_from_dict",
    "scenario_to_dict",
    "load_scenario",
    "dump_scenario",
    "bundled_scenarios",
    "resolve_config",
]

CONTROLLER_KINDS = ("mpc", "deepc", "hold")


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class ControllerSpec:
    kind: str = "deepc"
    hold_v_dc: float = 120.0
    horizon_past: int = 1
    horizon_future: int = 2
    lambda_g: float = 1.0
    lambda_sigma: float = 1e5
    anchor_currents: bool = True
    q1: float = 10.0
    q2_current: float = 1.0
    q2_voltage: float = 50.0
    r_imbalance: float = 1000.0
    r_battery: float = 1.0
    i_b_max: float = 200.0
    v_o_min: float = 108.0
    v_o_max: float = 132.0
    duty_min: float = 0.5
    duty_max: float = 1.0

    def weights(self, n: int, v_bus_ref: float) -> CostWeights:
        return CostWeights.default(n, v_bus_ref, q1=self.q1, q2_current=self.q2_current,
                                   q2_voltage=self.q2_voltage, r_imbalance=self.r_imbalance,
                                   r_battery=self.r_battery)

    def constraints(self, legs: list[Leg]) -> Constraints:
        return Constraints([leg.converter.i_l_max for leg in legs], self.v_o_min, self.v_o_max, self.i_b_max,
                           self.duty_min, self.duty_max)


@dataclass
class ExcitationSpec:
    samples: int = 30
    amplitude: float = 2.0
    current_amplitude: float = 10.0
    seed: int = 1


@dataclass
class MetricSpec:
    settling_band: float = 0.01
    terminal_window: float = 0.05
    thresholds: dict[str, float] = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    legs: list[Leg]
    sim: SimConfig
    controller: ControllerSpec
    activation_time: float = 0.0
    excitation: ExcitationSpec = field(default_factory=ExcitationSpec)
    metrics: MetricSpec = field(default_factory=MetricSpec)

    def __post_init__(self):
        if not 0 <= self.activation_time <= self.sim.duration:
            raise ConfigError("activation_time_ms", "must lie within [0, duration]")
        if self.controller.kind not in CONTROLLER_KINDS:
            raise ConfigError("controller.kind", f"must be one of {CONTROLLER_KINDS}")

    @property
    def n(self) -> int:
        return len(self.legs)

    @property
    def nominal_load(self) -> float:
        return self.sim.load_profile(0.0)


def _scale(value: float, exponent: int) -> float:
    """``value * 10**exponent`` done in decimal so unit conversions round-trip."""
    if value != value or value in (float("inf"), float("-inf")):
        return value
    return float(Decimal(repr(float(value))).scaleb(exponent))


def _unit(value: float, exponent: int) -> float:
    """Inverse of ``_scale(., -exponent)``: the written number that parses back to ``value`` exactly."""
    out = _scale(value, exponent)
    if _scale(out, -exponent) == value:
        return out
    up = down = out
    for _ in range(8):
        up, down = math.nextafter(up, math.inf), math.nextafter(down, -math.inf)
        for cand in (up, down):
            if _scale(cand, -exponent) == value:
                return cand
    return out


class _Reader:
    """Typed access to a nested dict that reports the full key path on error."""

    def __init__(self, data: dict, path: str = ""):
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected a table")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def _key(self, key):
        return f"{self.path}.{key}" if self.path else key

    def has(self, key) -> bool:
        return key in self.data

    def get(self, key, kind=float, default: Any = ...):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise ConfigError(self._key(key), "missing required field")
            return default
        value = self.data[key]
        try:
            if kind is float:
                if isinstance(value, bool):
                    raise TypeError
                return float(value)
            if kind is int:
                if isinstance(value, bool) or int(value) != value:
                    raise TypeError
                return int(value)
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                return value
            if kind is str:
                if not isinstance(value, str):
                    raise TypeError
                return value
            if kind is list:
                return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(self._key(key), f"expected {kind.__name__}, got {value!r}") from None
        return value

    def table(self, key, optional=False) -> "_Reader":
        self.used.add(key)
        if key not in self.data:
            if optional:
                return _Reader({}, self._key(key))
            raise ConfigError(self._key(key), "missing required table")
        return _Reader(self.data[key], self._key(key))

    def finish(self):
        extra = set(self.data) - self.used
        if extra:
            raise ConfigError(self._key(sorted(extra)[0]), "unknown field")


def _load_profile(r: _Reader) -> LoadProfile:
    kind = r.get("kind", str)
    if kind == "constant":
        prof = ConstantLoad(r.get("level_a"))
    elif kind == "sine":
        prof = SineLoad(r.get("offset_a"), r.get("amplitude_a"), r.get("frequency_hz"))
    elif kind == "piecewise":
        r.used.add("breakpoints_ms_a")
        raw = r.data.get("breakpoints_ms_a")
        if not raw:
            raise ConfigError(r._key("breakpoints_ms_a"), "missing required field")
        prof = PiecewiseConstantLoad(tuple((_scale(t, -3), float(v)) for t, v in raw))
    else:
        raise ConfigError(r._key("kind"), "must be constant, sine or piecewise")
    r.finish()
    return prof


def _load_to_dict(p: LoadProfile) -> dict:
    if isinstance(p, ConstantLoad):
        return {"kind": "constant", "level_a": p.level}
    if isinstance(p, SineLoad):
        return {"kind": "sine", "offset_a": p.offset, "amplitude_a": p.amplitude, "frequency_hz": p.frequency}
    if isinstance(p, PiecewiseConstantLoad):
        return {"kind": "piecewise", "breakpoints_ms_a": [[_unit(t, 3), v] for t, v in p.breakpoints]}
    raise TypeError(f"cannot serialise load profile {p!r}")


def _wrap(path, fn, *args):
    try:
        return fn(*args)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def _known_metric(name: str) -> bool:
    names = {f.name for f in fields(MetricsReport)}
    if name.endswith("_ms"):
        name = name[:-3]
    return name in names or name.startswith("qp_")


def scenario_from_dict(data: dict) -> Scenario:
    root = _Reader(data)
    name = root.get("name", str)
    activation = _scale(root.get("activation_time_ms", float, 0.0), -3)

    legs = []
    root.used.add("legs")
    raw_legs = data.get("legs")
    if not isinstance(raw_legs, list) or not raw_legs:
        raise ConfigError("legs", "need at least one [[legs]] entry")
    for i, raw in enumerate(raw_legs):
        lr = _Reader(raw, f"legs[{i}]")
        s = lr.table("stack")
        stack = _wrap(s.path, StackParams,
                      s.get("e_oc_v"), s.get("act_coeff_v"), s.get("exchange_current_a"), s.get("r_fc_ohm"),
                      (s.get("deg_d0_v", float, 0.0), s.get("deg_d1_v_per_s", float, 0.0),
                       s.get("deg_d2_v_per_s2", float, 0.0)),
                      s.get("cell_count", int, 330), s.get("i_rated_max_a", float, 250.0))
        op_time = s.get("operating_time_s", float, 0.0)
        s.finish()
        c = lr.table("converter")
        conv = _wrap(c.path, ConverterParams,
                     _scale(c.get("l_uh"), -6), _scale(c.get("c_mf"), -3), _scale(c.get("r_l_milliohm"), -3),
                     _scale(c.get("r_c_milliohm"), -3), c.get("i_l_max_a", float, 350.0))
        c.finish()
        lr.finish()
        legs.append(Leg(stack, conv, op_time))
    n = len(legs)

    sr = root.table("sim")
    load = _load_profile(sr.table("load"))
    i0 = sr.get("initial_i_l_a", list, [0.0] * n)
    u0 = sr.get("initial_u_c_v", list, [0.0] * n)
    if len(i0) != n or len(u0) != n:
        raise ConfigError("sim.initial_i_l_a", f"initial state needs {n} entries per vector")
    sim = _wrap("sim", SimConfig,
                _scale(sr.get("duration_ms"), -3), load, MfcsState(i0, u0),
                _scale(sr.get("integrator_step_us", float, 10.0), -6),
                _scale(sr.get("control_interval_ms", float, 1.0), -3),
                sr.get("v_bus_ref_v", float, 120.0), sr.get("seed", int, 0),
                sr.get("noise_amplitude", float, 0.0))
    sr.finish()

    cr = root.table("controller", optional=True)
    ctrl = ControllerSpec(
        kind=cr.get("kind", str, "deepc"),
        hold_v_dc=cr.get("hold_v_dc_v", float, sim.v_bus_ref),
        horizon_past=cr.get("horizon_past", int, 1),
        horizon_future=cr.get("horizon_future", int, 2),
        lambda_g=cr.get("lambda_g", float, 1.0),
        lambda_sigma=cr.get("lambda_sigma", float, 1e5),
        anchor_currents=cr.get("anchor_currents", bool, True),
    )
    wr = cr.table("weights", optional=True)
    for key in ("q1", "q2_current", "q2_voltage", "r_imbalance", "r_battery"):
        setattr(ctrl, key, wr.get(key, float, getattr(ctrl, key)))
        if getattr(ctrl, key) < 0:
            raise ConfigError(f"{wr.path}.{key}", "weights must be non-negative")
    wr.finish()
    kr = cr.table("constraints", optional=True)
    ctrl.i_b_max = kr.get("i_b_max_a", float, ctrl.i_b_max)
    ctrl.v_o_min = kr.get("v_o_min_v", float, ctrl.v_o_min)
    ctrl.v_o_max = kr.get("v_o_max_v", float, ctrl.v_o_max)
    ctrl.duty_min = kr.get("duty_min", float, ctrl.duty_min)
    ctrl.duty_max = kr.get("duty_max", float, ctrl.duty_max)
    kr.finish()
    cr.finish()
    if ctrl.kind not in CONTROLLER_KINDS:
        raise ConfigError("controller.kind", f"must be one of {CONTROLLER_KINDS}")
    if ctrl.horizon_past < 1 or ctrl.horizon_future < 1:
        raise ConfigError("controller.horizon_past", "horizons must be at least 1")
    _wrap("controller.constraints", ctrl.constraints, legs)

    er = root.table("excitation", optional=True)
    exc = ExcitationSpec(er.get("samples", int, 30), er.get("amplitude_v", float, 2.0),
                         er.get("current_amplitude_a", float, 10.0), er.get("seed", int, 1))
    er.finish()
    if exc.samples < 1:
        raise ConfigError("excitation.samples", "must be positive")

    mr = root.table("metrics", optional=True)
    thresholds = dict(mr.table("thresholds", optional=True).data)
    for key, value in thresholds.items():
        if not (key.endswith("_max") or key.endswith("_min")) or isinstance(value, bool):
            raise ConfigError(f"metrics.thresholds.{key}", "threshold keys end in _min or _max")
        if not _known_metric(key.rsplit("_", 1)[0]):
            raise ConfigError(f"metrics.thresholds.{key}", "unknown metric")
        thresholds[key] = float(value)
    metrics = MetricSpec(mr.get("settling_band", float, 0.01), _scale(mr.get("terminal_window_ms", float, 50.0), -3),
                         thresholds)
    mr.finish()
    root.finish()
    return Scenario(name, legs, sim, ctrl, activation, exc, metrics)


def scenario_to_dict(s: Scenario) -> dict:
    legs = []
    for leg in s.legs:
        st, cv = leg.stack, leg.converter
        legs.append({
            "stack": {
                "e_oc_v": st.e_oc, "act_coeff_v": st.act_coeff, "exchange_current_a": st.exchange_current,
                "r_fc_ohm": st.r_fc, "deg_d0_v": st.deg_quadratic[0], "deg_d1_v_per_s": st.deg_quadratic[1],
                "deg_d2_v_per_s2": st.deg_quadratic[2], "cell_count": st.cell_count,
                "i_rated_max_a": st.i_rated_max, "operating_time_s": leg.operating_time,
            },
            "converter": {
                "l_uh": _unit(cv.l, 6), "c_mf": _unit(cv.c, 3), "r_l_milliohm": _unit(cv.r_l, 3),
                "r_c_milliohm": _unit(cv.r_c, 3), "i_l_max_a": cv.i_l_max,
            },
        })
    c = s.controller
    return {
        "name": s.name,
        "activation_time_ms": _unit(s.activation_time, 3),
        "sim": {
            "duration_ms": _unit(s.sim.duration, 3),
            "control_interval_ms": _unit(s.sim.control_interval, 3),
            "integrator_step_us": _unit(s.sim.integrator_step, 6),
            "v_bus_ref_v": s.sim.v_bus_ref,
            "seed": s.sim.seed,
            "noise_amplitude": s.sim.noise_amplitude,
            "initial_i_l_a": [float(v) for v in s.sim.initial_state.i_l],
            "initial_u_c_v": [float(v) for v in s.sim.initial_state.u_c],
            "load": _load_to_dict(s.sim.load_profile),
        },
        "legs": legs,
        "controller": {
            "kind": c.kind, "hold_v_dc_v": c.hold_v_dc, "horizon_past": c.horizon_past,
            "horizon_future": c.horizon_future, "lambda_g": c.lambda_g, "lambda_sigma": c.lambda_sigma,
            "anchor_currents": c.anchor_currents,
            "weights": {"q1": c.q1, "q2_current": c.q2_current, "q2_voltage": c.q2_voltage,
                        "r_imbalance": c.r_imbalance, "r_battery": c.r_battery},
            "constraints": {"i_b_max_a": c.i_b_max, "v_o_min_v": c.v_o_min, "v_o_max_v": c.v_o_max,
                            "duty_min": c.duty_min, "duty_max": c.duty_max},
        },
        "excitation": {"samples": s.excitation.samples, "amplitude_v": s.excitation.amplitude,
                       "current_amplitude_a": s.excitation.current_amplitude, "seed": s.excitation.seed},
        "metrics": {"settling_band": s.metrics.settling_band,
                    "terminal_window_ms": _unit(s.metrics.terminal_window, 3),
                    "thresholds": dict(s.metrics.thresholds)},
    }


def load_scenario(path) -> Scenario:
    path = resolve_config(path)
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML: {exc}") from None
    return scenario_from_dict(data)


def dump_scenario(s: Scenario, path) -> Path:
    path = Path(path)
    path.write_text(tomli_w.dumps(scenario_to_dict(s)))
    return path


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("mfcs") / "scenarios"
    return {p.name.removesuffix(".toml"): Path(str(p)) for p in root.iterdir() if p.name.endswith(".toml")}


def resolve_config(name_or_path) -> Path:
    """Existing file path, or the name of a bundled scenario (``activation``, ``sine-follow``)."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    key = str(name_or_path).replace("_", "-")
    if key in bundled:
        return bundled[key]
    raise ConfigError(str(name_or_path), f"no such file or bundled scenario (bundled: {sorted(bundled)})")

