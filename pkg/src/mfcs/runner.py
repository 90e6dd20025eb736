"""End-to-end scenario execution: data collection, controller set-up, closed loop, metrics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .circuit import assemble_continuous, discretize
from .config import Scenario
from .controllers import DeepcConfig, DeepcController, KMaps, MpcController, SwitchedController
from .hankel import PersistencyReport, assemble_predictor, check_persistency
from .metrics import MetricSettings, MetricsReport, check_thresholds, compute_metrics
from .simulator import HoldController, TrajectoryLog, collect_excitation_data, operating_point, run_closed_loop

__all__ = ["RunResult", "with_seed", "collect_for", "build_controller", "run_scenario", "write_outputs"]

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    scenario: Scenario
    log: TrajectoryLog
    metrics: MetricsReport
    verdicts: dict
    persistency: PersistencyReport | None = None

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts.values())


def with_seed(s: Scenario, seed: int | None) -> Scenario:
    """Copy of ``s`` with both the excitation and simulation seeds replaced."""
    if seed is None:
        return s
    return replace(s, sim=replace(s.sim, seed=seed), excitation=replace(s.excitation, seed=seed))


def collect_for(s: Scenario) -> TrajectoryLog:
    """Excitation record around the equal-sharing operating point at the initial load."""
    x_op, _ = operating_point(s.legs, s.nominal_load, s.sim.v_bus_ref)
    exc = s.excitation
    sim = replace(s.sim, duration=exc.samples * s.sim.control_interval, initial_state=x_op)
    return collect_excitation_data(sim, s.legs, exc.amplitude, exc.seed, current_amplitude=exc.current_amplitude)


def build_controller(s: Scenario, data: TrajectoryLog | None = None):
    """Active controller for ``s.controller.kind`` plus the hold phase before activation."""
    c = s.controller
    n = s.n
    weights = c.weights(n, s.sim.v_bus_ref)
    kmaps = KMaps.build(n)
    cons = c.constraints(s.legs)
    if c.kind == "hold":
        active = HoldController(c.hold_v_dc)
    elif c.kind == "mpc":
        model = discretize(assemble_continuous([leg.converter for leg in s.legs]), s.sim.control_interval)
        active = MpcController(model, weights, kmaps, cons, c.horizon_future)
    else:
        if data is None:
            raise ValueError("the data-driven controller needs an excitation record")
        predictor = assemble_predictor(data, c.horizon_past, c.horizon_future)
        active = DeepcController(DeepcConfig(predictor, c.lambda_g, c.lambda_sigma), weights, kmaps, cons,
                                 c.anchor_currents)
    if s.activation_time <= 0:
        return active, active
    return SwitchedController(HoldController(c.hold_v_dc), active, s.activation_time), active


def run_scenario(s: Scenario, data: TrajectoryLog | None = None) -> RunResult:
    persistency = None
    if s.controller.kind == "deepc":
        if data is None:
            data = collect_for(s)
        persistency = check_persistency(data, s.controller.horizon_past, s.controller.horizon_future)
        log.info("persistency: %s", persistency)
    controller, active = build_controller(s, data)
    traj = run_closed_loop(s.sim, controller, s.legs)
    traj.meta.update(scenario=s.name, controller=s.controller.kind)
    stats = getattr(active, "stats", None)
    report = compute_metrics(traj, MetricSettings.from_scenario(s),
                             stats.iterations if stats else (), stats.residuals if stats else ())
    return RunResult(s, traj, report, check_thresholds(report, s.metrics.thresholds), persistency)


def _json_default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def write_outputs(result: RunResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectory": result.log.to_csv(out / "trajectory.csv")}
    summary = {
        "scenario": result.scenario.name,
        "controller": result.scenario.controller.kind,
        "passed": result.passed,
        "metrics": result.metrics.to_dict(),
        "thresholds": result.verdicts,
    }
    if result.persistency is not None:
        summary["persistency"] = {k: getattr(result.persistency, k) for k in
                                  ("status", "length", "required_length", "rank", "required_rank",
                                   "conventional_length")}
    paths["metrics"] = out / "metrics.json"
    paths["metrics"].write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    return paths

