"""Scalar performance metrics and per-panel data files for a closed-loop run."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .simulator import TrajectoryLog

__all__ = [
    "InsufficientDataError",
    "MetricSettings",
    "MetricsReport",
    "compute_metrics",
    "settling_time",
    "check_thresholds",
    "emit_plot_data",
    "PANEL_FILES",
]

PANEL_FILES = {
    "currents": "panel_currents.csv",
    "voltages": "panel_voltages.csv",
    "terminal": "panel_terminal.csv",
    "battery": "panel_battery.csv",
}


class InsufficientDataError(ValueError):
    """The log is too short for the settling or steady-state windows."""


@dataclass(frozen=True)
class MetricSettings:
    activation_time: float
    v_bus_ref: float
    r_l: tuple[float, ...]
    settling_band: float = 0.01
    terminal_window: float = 0.05

    @classmethod
    def from_scenario(cls, scenario) -> "MetricSettings":
        return cls(scenario.activation_time, scenario.sim.v_bus_ref,
                   tuple(leg.converter.r_l for leg in scenario.legs),
                   scenario.metrics.settling_band, scenario.metrics.terminal_window)


@dataclass
class MetricsReport:
    settling_time: float
    settling_delay: float
    bus_rmse: float
    bus_error_frac: float
    load_follow_rmse: float
    circ_current_ss: float
    circ_current_equal: float
    circ_reduction_vs_equal: float
    terminal_spread_ss: float
    terminal_spread_equal: float
    terminal_spread_ratio: float
    qp_solve_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Plain dict for JSON; a run that never settles reports ``None`` instead of infinity."""
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}

    def value(self, name: str) -> float:
        """Metric by threshold name; ``*_ms`` variants are the time metrics in milliseconds."""
        if name.endswith("_ms"):
            return 1e3 * float(getattr(self, name[:-3]))
        if name.startswith("qp_"):
            return float(self.qp_solve_stats[name[3:]])
        return float(getattr(self, name))


def _rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else math.nan


def settling_time(times, signals, window_start: float, band: float, after: float = 0.0) -> float:
    """First instant ``>= after`` from which every column of ``signals`` stays within
    ``band`` (relative) of its mean over ``t >= window_start``.

    Channels whose final mean is zero use an absolute band of ``band``.
    """
    times = np.asarray(times, dtype=float)
    signals = np.asarray(signals, dtype=float).reshape(times.size, -1)
    final = signals[times >= window_start - 1e-12].mean(axis=0)
    tol = band * np.maximum(np.abs(final), 1.0)
    inside = np.all(np.abs(signals - final) <= tol, axis=1)
    candidates = np.flatnonzero(times >= after - 1e-12)
    if candidates.size == 0:
        raise InsufficientDataError("no samples after the activation time")
    outside = candidates[~inside[candidates]]
    if outside.size == 0:
        return float(times[candidates[0]])
    last_out = outside[-1]
    if last_out + 1 >= times.size:
        return math.inf
    return float(times[last_out + 1])


def compute_metrics(log: TrajectoryLog, settings: MetricSettings, qp_iterations: Sequence[int] = (),
                    qp_residuals: Sequence[float] = ()) -> MetricsReport:
    """Settling, tracking and circulating-current metrics.

    Steady-state quantities average over the last ``terminal_window``
    seconds; tracking errors cover the samples from activation onward.
    """
    if len(log) < 2:
        raise InsufficientDataError("need at least two logged samples")
    t = log.times
    tau = t[1] - t[0]
    t_end = t[-1] + tau
    window_start = t_end - settings.terminal_window
    if window_start < settings.activation_time - 1e-12:
        raise InsufficientDataError(
            f"run ends {t_end - settings.activation_time:.4f} s after activation; "
            f"need at least the {settings.terminal_window:.4f} s steady-state window")
    n = log.n_legs
    if len(settings.r_l) != n:
        raise ValueError("settings.r_l must list one ESR per leg")

    active = t >= settings.activation_time - 1e-12
    tail = t >= window_start - 1e-12
    signals = np.column_stack([log.i_l, log.v_o])
    t_settle = settling_time(t, signals, window_start, settings.settling_band, settings.activation_time)

    v_err = log.v_o[active] - settings.v_bus_ref
    mismatch = log.i_l.sum(axis=1) + log.i_b - log.w
    r_l = np.asarray(settings.r_l, dtype=float)
    total = float(log.i_l[tail].sum(axis=1).mean())

    if n >= 2:
        circ_ss = float(np.mean(log.i_circ[tail]))
        share = total / n
        circ_eq = float((r_l[0] - r_l[1]) * share / (r_l[0] + r_l[1]))
        reduction = 1.0 - abs(circ_ss) / abs(circ_eq) if abs(circ_eq) > 1e-12 else 0.0
        v_dc = log.v_dc[tail].mean(axis=0)
        spread = float(v_dc.max() - v_dc.min())
        spread_eq = float((r_l.max() - r_l.min()) * share)
    else:
        circ_ss = circ_eq = spread = spread_eq = 0.0
        reduction = 0.0

    stats = {}
    if len(qp_iterations):
        it = np.asarray(qp_iterations, dtype=float)
        stats = {"solves": int(it.size), "iterations_mean": float(it.mean()), "iterations_max": float(it.max())}
        if len(qp_residuals):
            stats["residual_max"] = float(np.max(qp_residuals))

    return MetricsReport(
        settling_time=t_settle,
        settling_delay=t_settle - settings.activation_time,
        bus_rmse=_rms(v_err),
        bus_error_frac=abs(float(log.v_o[tail].mean()) - settings.v_bus_ref) / settings.v_bus_ref,
        load_follow_rmse=_rms(mismatch[active]),
        circ_current_ss=circ_ss,
        circ_current_equal=circ_eq,
        circ_reduction_vs_equal=reduction,
        terminal_spread_ss=spread,
        terminal_spread_equal=spread_eq,
        terminal_spread_ratio=spread / spread_eq if spread_eq > 1e-12 else 0.0,
        qp_solve_stats=stats,
    )


def check_thresholds(report: MetricsReport, thresholds: dict[str, float]) -> dict[str, dict]:
    """Evaluate ``<metric>_max`` / ``<metric>_min`` limits; unknown metric names raise ``KeyError``."""
    verdicts = {}
    for key, limit in thresholds.items():
        name, kind = key.rsplit("_", 1)
        try:
            value = report.value(name)
        except (AttributeError, KeyError):
            raise KeyError(f"unknown metric in threshold {key!r}") from None
        ok = value <= limit if kind == "max" else value >= limit
        verdicts[key] = {"value": value, "limit": limit, "passed": bool(ok and not math.isnan(value))}
    return verdicts


def _write(path: Path, header: list[str], cols: list[np.ndarray]) -> Path:
    data = np.column_stack(cols)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])
    return path


def emit_plot_data(log: TrajectoryLog, out_dir) -> dict[str, Path]:
    """Write the four figure panels as CSV files and return their paths.

    * currents: inductor currents and stack currents ``I_FC = D I_L``
    * voltages: bus voltage and stack voltages
    * terminal: converter terminal voltages
    * battery: battery current and load current
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = log.n_legs
    idx = [str(i + 1) for i in range(n)]
    t = log.times
    return {
        "currents": _write(out / PANEL_FILES["currents"], ["t"] + [f"iL{i}" for i in idx] + [f"ifc{i}" for i in idx],
                           [t, log.i_l, log.i_fc]),
        "voltages": _write(out / PANEL_FILES["voltages"], ["t", "Vo"] + [f"vfc{i}" for i in idx],
                           [t, log.v_o, log.v_fc]),
        "terminal": _write(out / PANEL_FILES["terminal"], ["t"] + [f"vdc{i}" for i in idx], [t, log.v_dc]),
        "battery": _write(out / PANEL_FILES["battery"], ["t", "ib", "iload"], [t, log.i_b, log.w]),
    }
