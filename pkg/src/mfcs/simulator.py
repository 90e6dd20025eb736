"""Closed-loop simulation of the time-averaged plant under a sampled controller."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .circuit import ConverterParams, MfcsInput, MfcsState, bus_voltage, circulating_current, total_capacitor_resistance
from .stack import StackParams, stack_voltage

__all__ = [
    "Leg",
    "LoadProfile",
    "ConstantLoad",
    "SineLoad",
    "PiecewiseConstantLoad",
    "SimConfig",
    "Measurement",
    "Controller",
    "TrajectoryLog",
    "SimulationError",
    "step",
    "duty_from_command",
    "run_closed_loop",
    "run_discrete",
    "operating_point",
    "operating_stack_voltage",
    "collect_excitation_data",
    "ExcitationController",
    "HoldController",
]

DIVERGENCE_LIMIT = 1e6
DUTY_MIN, DUTY_MAX = 0.5, 1.0


class SimulationError(RuntimeError):
    """Raised when a run cannot continue; ``t`` is the failing timestamp."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"t={t * 1e3:.3f} ms: {message}")
        self.t = t


@dataclass(frozen=True)
class Leg:
    """One stack/converter subsystem. ``operating_time`` feeds the degradation term."""

    stack: StackParams
    converter: ConverterParams
    operating_time: float = 0.0


class LoadProfile:
    def __call__(self, t: float) -> float:  # pragma: no cover - interface
        raise NotImplementedError


@dataclass(frozen=True)
class ConstantLoad(LoadProfile):
    level: float

    def __post_init__(self):
        if self.level < 0:
            raise ValueError("load level must be non-negative")

    def __call__(self, t):
        return self.level


@dataclass(frozen=True)
class SineLoad(LoadProfile):
    offset: float
    amplitude: float
    frequency: float

    def __post_init__(self):
        if self.offset - abs(self.amplitude) < 0:
            raise ValueError("sine load must stay non-negative")

    def __call__(self, t):
        return self.offset + self.amplitude * math.sin(2.0 * math.pi * self.frequency * t)


@dataclass(frozen=True)
class PiecewiseConstantLoad(LoadProfile):
    """Level ``breakpoints[k][1]`` holds from ``breakpoints[k][0]`` until the next breakpoint."""

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bps = tuple((float(t), float(v)) for t, v in self.breakpoints)
        if not bps:
            raise ValueError("need at least one breakpoint")
        if any(v < 0 for _, v in bps):
            raise ValueError("load levels must be non-negative")
        if any(b[0] <= a[0] for a, b in zip(bps, bps[1:])):
            raise ValueError("breakpoint times must be strictly increasing")
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "_times", np.array([t for t, _ in bps]))

    def __call__(self, t):
        k = int(np.searchsorted(self._times, t + 1e-12, side="right")) - 1
        return self.breakpoints[max(k, 0)][1]


@dataclass
class SimConfig:
    duration: float
    load_profile: LoadProfile
    initial_state: MfcsState
    integrator_step: float = 1e-5
    control_interval: float = 1e-3
    v_bus_ref: float = 120.0
    seed: int = 0
    noise_amplitude: float = 0.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 < self.integrator_step <= self.control_interval:
            raise ValueError("need 0 < integrator_step <= control_interval")
        if abs(self.substeps * self.integrator_step - self.control_interval) > 1e-9 * self.control_interval:
            raise ValueError("integrator_step must divide the control interval")
        if abs(self.n_steps * self.control_interval - self.duration) > 1e-6 * self.control_interval:
            raise ValueError("control interval must divide the duration")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be non-negative")

    @property
    def substeps(self) -> int:
        return int(round(self.control_interval / self.integrator_step))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.control_interval))


@dataclass
class Measurement:
    """What a controller sees at a control instant (possibly noisy)."""

    t: float
    state: MfcsState
    i_load: float
    v_fc: np.ndarray
    step_index: int


class Controller(Protocol):
    def control(self, meas: Measurement) -> MfcsInput: ...

    def record(self, y: np.ndarray, u: np.ndarray, w: float) -> None: ...


def _rows(a, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if k == 0:
        return a.reshape(0, a.shape[-1] if a.ndim == 2 else 0)
    return a.reshape(k, -1)


@dataclass
class TrajectoryLog:
    """One row per control interval: outputs, inputs, load and auxiliary signals."""

    times: np.ndarray
    y: np.ndarray
    u: np.ndarray
    w: np.ndarray
    v_fc: np.ndarray
    duty: np.ndarray
    i_circ: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        k = self.times.size
        self.y = _rows(self.y, k)
        self.u = _rows(self.u, k)
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        n = self.y.shape[1] - 1
        self.v_fc = np.asarray(self.v_fc, dtype=float).reshape(k, n)
        self.duty = np.asarray(self.duty, dtype=float).reshape(k, n)
        self.i_circ = np.asarray(self.i_circ, dtype=float).reshape(-1)
        if not (self.u.shape == (k, n + 1) and self.w.size == k and self.i_circ.size == k):
            raise ValueError("trajectory columns must have equal length")
        if k > 1:
            dt = np.diff(self.times)
            if np.any(dt <= 0) or np.max(np.abs(dt - dt[0])) > 1e-9 * max(1.0, abs(dt[0])) + 1e-12:
                raise ValueError("times must be strictly increasing with uniform spacing")

    def __len__(self) -> int:
        return self.times.size

    @property
    def n_legs(self) -> int:
        return self.y.shape[1] - 1

    @property
    def i_l(self) -> np.ndarray:
        return self.y[:, :-1]

    @property
    def v_o(self) -> np.ndarray:
        return self.y[:, -1]

    @property
    def v_dc(self) -> np.ndarray:
        return self.u[:, :-1]

    @property
    def i_b(self) -> np.ndarray:
        return self.u[:, -1]

    @property
    def i_fc(self) -> np.ndarray:
        return self.duty * self.i_l

    def columns(self) -> list[str]:
        return self.column_names(self.n_legs)

    @staticmethod
    def column_names(n: int) -> list[str]:
        return (["t"] + [f"iL{i + 1}" for i in range(n)] + ["Vo"] + [f"vdc{i + 1}" for i in range(n)]
                + ["ib", "iload"] + [f"vfc{i + 1}" for i in range(n)] + [f"d{i + 1}" for i in range(n)]
                + ["icirc"])

    def as_array(self) -> np.ndarray:
        return np.column_stack([self.times, self.y, self.u, self.w, self.v_fc, self.duty, self.i_circ])

    def slice(self, start: int, stop: int | None = None) -> "TrajectoryLog":
        s = np.s_[start:stop]
        return TrajectoryLog(self.times[s], self.y[s], self.u[s], self.w[s], self.v_fc[s], self.duty[s],
                             self.i_circ[s], dict(self.meta))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            for row in self.as_array():
                writer.writerow([repr(float(v)) for v in row])
        return path

    @classmethod
    def from_csv(cls, path) -> "TrajectoryLog":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
        n = sum(1 for h in header if h.startswith("iL"))
        expected = cls.column_names(n)
        if header != expected:
            raise ValueError(f"unexpected CSV header {header}; expected {expected}")
        data = data.reshape(-1, len(header))
        c = 1
        times = data[:, 0]
        y = data[:, c:c + n + 1]
        c += n + 1
        u = data[:, c:c + n + 1]
        c += n + 1
        w = data[:, c]
        c += 1
        v_fc = data[:, c:c + n]
        c += n
        duty = data[:, c:c + n]
        c += n
        return cls(times, y, u, w, v_fc, duty, data[:, c])


class _Rhs:
    """KVL right-hand side with the bus voltage solved at every evaluation."""

    def __init__(self, params: Sequence[ConverterParams]):
        self.l = np.array([p.l for p in params])
        self.c = np.array([p.c for p in params])
        self.r_l = np.array([p.r_l for p in params])
        self.r_c = np.array([p.r_c for p in params])
        self.r_tot = total_capacitor_resistance(params)
        self.n = len(params)

    def bus(self, i_l, u_c, i_b, i_load):
        return self.r_tot * (np.sum(i_l + u_c / self.r_c) - i_load + i_b)

    def __call__(self, x, v_dc, i_b, i_load):
        n = self.n
        i_l, u_c = x[:n], x[n:]
        v_o = self.bus(i_l, u_c, i_b, i_load)
        di = (-self.r_l * i_l + v_dc - v_o) / self.l
        du = (v_o - u_c) / (self.r_c * self.c)
        return np.concatenate([di, du])


def _rk4(f, x, dt, *args):
    k1 = f(x, *args)
    k2 = f(x + 0.5 * dt * k1, *args)
    k3 = f(x + 0.5 * dt * k2, *args)
    k4 = f(x + dt * k3, *args)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(state: MfcsState, inp: MfcsInput, i_load: float, dt: float,
         params: Sequence[ConverterParams]) -> MfcsState:
    """One RK4 step of the inductor/capacitor dynamics with inputs held over ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    rhs = _Rhs(params)
    x = _rk4(rhs, state.to_vector(), dt, inp.v_dc, inp.i_b, i_load)
    if not np.all(np.abs(x) < DIVERGENCE_LIMIT):
        raise SimulationError("state diverged")
    return MfcsState.from_vector(x)


def duty_from_command(v_dc_cmd: float, v_fc_prev: float) -> float:
    if v_fc_prev <= 0:
        raise ValueError("stack voltage must be positive")
    return min(max(v_dc_cmd / v_fc_prev, DUTY_MIN), DUTY_MAX)


def _stack_voltages(plant: Sequence[Leg], i_fc: np.ndarray, t: float) -> np.ndarray:
    out = np.empty(len(plant))
    for k, leg in enumerate(plant):
        # the stack cannot sink current and is never driven past its rating here
        i = min(max(float(i_fc[k]), 0.0), leg.stack.i_rated_max)
        out[k] = stack_voltage(leg.stack, i, leg.operating_time + t)
    return out


def run_closed_loop(sim: SimConfig, controller: Controller, plant: Sequence[Leg]) -> TrajectoryLog:
    """Simulate ``sim.duration`` seconds, calling ``controller`` once per control interval.

    The returned input is held over the interval. Duty ratios are recomputed
    every integrator step from the command and the previous stack voltage.
    """
    plant = list(plant)
    n = len(plant)
    if sim.initial_state.n != n:
        raise ValueError("initial state does not match the number of legs")
    converters = [leg.converter for leg in plant]
    rhs = _Rhs(converters)
    r_l = rhs.r_l
    rng = np.random.default_rng(sim.seed)
    h = sim.integrator_step
    tau = sim.control_interval

    x = sim.initial_state.to_vector().copy()
    duty = np.ones(n)
    v_fc = _stack_voltages(plant, duty * x[:n], 0.0)

    rows_t, rows_y, rows_u, rows_w, rows_vfc, rows_d, rows_ic = [], [], [], [], [], [], []
    for k in range(sim.n_steps):
        t = k * tau
        i_load = sim.load_profile(t)
        state = MfcsState.from_vector(x)
        meas_state = state
        if sim.noise_amplitude > 0:
            noise = rng.uniform(-sim.noise_amplitude, sim.noise_amplitude, 2 * n)
            meas_state = MfcsState.from_vector(x + noise)
        meas = Measurement(t, meas_state, i_load, v_fc.copy(), k)
        try:
            cmd = controller.control(meas)
        except SimulationError:
            raise
        except Exception as exc:
            raise SimulationError(f"controller failed: {exc}", t) from exc
        if cmd.n != n:
            raise SimulationError("controller returned wrong input dimension", t)

        duty = np.array([duty_from_command(cmd.v_dc[i], v_fc[i]) for i in range(n)])
        v_dc = duty * v_fc
        v_o = rhs.bus(x[:n], x[n:], cmd.i_b, i_load)
        y = np.append(x[:n], v_o)
        u = np.append(v_dc, cmd.i_b)
        y_meas = y
        if sim.noise_amplitude > 0:
            y_meas = y + rng.uniform(-sim.noise_amplitude, sim.noise_amplitude, n + 1)
        controller.record(y_meas, u, i_load)

        rows_t.append(t)
        rows_y.append(y)
        rows_u.append(u)
        rows_w.append(i_load)
        rows_vfc.append(v_fc.copy())
        rows_d.append(duty.copy())
        rows_ic.append(circulating_current(x[:n], r_l) if n >= 2 else 0.0)

        for s in range(sim.substeps):
            ts = t + s * h
            duty = np.array([duty_from_command(cmd.v_dc[i], v_fc[i]) for i in range(n)])
            x = _rk4(rhs, x, h, duty * v_fc, cmd.i_b, sim.load_profile(ts))
            if not np.all(np.abs(x) < DIVERGENCE_LIMIT):
                raise SimulationError("state diverged", ts + h)
            v_fc = _stack_voltages(plant, duty * x[:n], ts + h)

    return TrajectoryLog(np.array(rows_t), np.array(rows_y), np.array(rows_u), np.array(rows_w),
                         np.array(rows_vfc), np.array(rows_d), np.array(rows_ic))


def run_discrete(model, controller: Controller, x0, load_profile: LoadProfile, steps: int, v_fc,
                 r_l=None) -> TrajectoryLog:
    """Closed loop on a discrete LTI model instead of the integrated circuit.

    Stack voltages are held at ``v_fc``; the logged duty is ``v_dc / v_fc``.
    """
    if not model.is_discrete:
        raise ValueError("run_discrete needs a discrete model")
    n = model.n_subsystems
    tau = model.time_step
    v_fc = np.broadcast_to(np.asarray(v_fc, dtype=float), (n,)).copy()
    x = np.asarray(x0, dtype=float).copy()
    rows = []
    for k in range(steps):
        t = k * tau
        w = load_profile(t)
        meas = Measurement(t, MfcsState.from_vector(x), w, v_fc.copy(), k)
        try:
            u = controller.control(meas).to_vector()
        except Exception as exc:
            raise SimulationError(f"controller failed: {exc}", t) from exc
        y = model.output(x, u, w)
        controller.record(y, u, w)
        ic = circulating_current(x[:n], r_l) if (r_l is not None and n >= 2) else 0.0
        rows.append((t, y, u, w, u[:n] / v_fc, ic))
        x = model.next_state(x, u, w)
        if not np.all(np.abs(x) < DIVERGENCE_LIMIT):
            raise SimulationError("state diverged", t + tau)
    return TrajectoryLog(
        np.array([r[0] for r in rows]), np.array([r[1] for r in rows]), np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]), np.tile(v_fc, (steps, 1)), np.array([r[4] for r in rows]),
        np.array([r[5] for r in rows]))


class HoldController:
    """Pins every terminal voltage to a constant and keeps the battery idle."""

    def __init__(self, v_dc: float | Sequence[float], i_b: float = 0.0):
        self.v_dc = v_dc
        self.i_b = i_b

    def control(self, meas: Measurement) -> MfcsInput:
        return MfcsInput(np.broadcast_to(np.asarray(self.v_dc, dtype=float), (meas.state.n,)).copy(), self.i_b)

    def record(self, y, u, w) -> None:
        pass


class ExcitationController:
    """Uniform random dither around a fixed operating input (seeded)."""

    def __init__(self, u_op, amplitude: float, current_amplitude: float, seed: int):
        self.u_op = np.asarray(u_op, dtype=float)
        self.amplitude = amplitude
        self.current_amplitude = current_amplitude
        self.rng = np.random.default_rng(seed)

    def control(self, meas: Measurement) -> MfcsInput:
        n = self.u_op.size - 1
        v = self.u_op[:n] + self.rng.uniform(-self.amplitude, self.amplitude, n)
        ib = self.u_op[n] + self.rng.uniform(-self.current_amplitude, self.current_amplitude)
        return MfcsInput(v, ib)

    def record(self, y, u, w) -> None:
        pass


def operating_point(plant: Sequence[Leg], i_load: float, v_bus_ref: float) -> tuple[MfcsState, MfcsInput]:
    """Equal-sharing equilibrium with the bus at ``v_bus_ref`` and the battery idle."""
    n = len(plant)
    r_l = np.array([leg.converter.r_l for leg in plant])
    share = np.full(n, i_load / n)
    v_dc = v_bus_ref + r_l * share
    return MfcsState(share, np.full(n, v_bus_ref)), MfcsInput(v_dc, 0.0)


def operating_stack_voltage(leg: Leg, i_l: float, v_dc: float) -> float:
    """Stack voltage consistent with ``I_FC = D I_L`` and ``D = v_dc / V_FC`` (fixed point)."""
    v_fc = leg.stack.e_oc
    for _ in range(50):
        i_fc = min(max(i_l * v_dc / v_fc, 0.0), leg.stack.i_rated_max)
        v_fc = stack_voltage(leg.stack, i_fc, leg.operating_time)
    return v_fc


def collect_excitation_data(sim: SimConfig, plant: Sequence[Leg], amplitude: float, seed: int, *,
                            current_amplitude: float | None = None) -> TrajectoryLog:
    """Record an open-loop excitation experiment for building the data-driven predictor.

    Terminal voltages get uniform dither of ``amplitude`` volts around the
    equal-sharing operating point; the battery current and the load get
    uniform dither of ``current_amplitude`` amps (default ``5 * amplitude``),
    the load changing once per control interval.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if current_amplitude is None:
        current_amplitude = 5.0 * amplitude
    i_nom = sim.load_profile(0.0)
    _, u_op = operating_point(plant, i_nom, sim.v_bus_ref)
    n = len(plant)
    for i, leg in enumerate(plant):
        # the duty window [0.5, 1] must contain the whole dither band at the operating point
        v_fc = operating_stack_voltage(leg, i_nom / n, u_op.v_dc[i])
        if u_op.v_dc[i] - amplitude < DUTY_MIN * v_fc or u_op.v_dc[i] + amplitude > DUTY_MAX * v_fc:
            raise ValueError(f"amplitude {amplitude} V drives leg {i + 1} outside the duty range")

    rng = np.random.default_rng(seed)
    tau = sim.control_interval
    levels = i_nom + rng.uniform(-current_amplitude, current_amplitude, sim.n_steps)
    load = PiecewiseConstantLoad(tuple((k * tau, max(float(v), 0.0)) for k, v in enumerate(levels)))
    ctrl = ExcitationController(u_op.to_vector(), amplitude, current_amplitude, seed + 1)
    data_sim = SimConfig(
        duration=sim.duration,
        load_profile=load,
        initial_state=sim.initial_state,
        integrator_step=sim.integrator_step,
        control_interval=tau,
        v_bus_ref=sim.v_bus_ref,
        seed=sim.seed,
        noise_amplitude=sim.noise_amplitude,
    )
    log = run_closed_loop(data_sim, ctrl, plant)
    log.meta.update(kind="excitation", amplitude=amplitude, current_amplitude=current_amplitude, seed=seed)
    return log
