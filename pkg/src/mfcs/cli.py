"""Command-line entry point.

Exit status is 0 when every configured threshold passes, 1 when a threshold
fails and 2 on configuration, data or simulation errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import CONTROLLER_KINDS, ConfigError, bundled_scenarios, load_scenario
from .hankel import PersistencyError, check_persistency
from .metrics import InsufficientDataError, MetricSettings, check_thresholds, compute_metrics, emit_plot_data
from .runner import collect_for, run_scenario, with_seed, write_outputs
from .simulator import SimulationError, TrajectoryLog

EXIT_OK, EXIT_THRESHOLD, EXIT_ERROR = 0, 1, 2


def _scenario(args):
    s = with_seed(load_scenario(args.config), getattr(args, "seed", None))
    kind = getattr(args, "controller", None)
    if kind:
        s = replace(s, controller=replace(s.controller, kind=kind))
    return s


def cmd_collect(args) -> int:
    s = _scenario(args)
    data = collect_for(s)
    report = check_persistency(data, s.controller.horizon_past, s.controller.horizon_future)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.to_csv(out / "excitation.csv")
    print(f"wrote {len(data)} samples to {out / 'excitation.csv'}; persistency {report.status.value} "
          f"(length {report.length} >= {report.required_length}, rank {report.rank}/{report.required_rank})")
    return EXIT_OK if report.ok else EXIT_THRESHOLD


def _print_verdicts(verdicts) -> None:
    for key, v in verdicts.items():
        print(f"{'PASS' if v['passed'] else 'FAIL'} {key}: {v['value']:.6g} (limit {v['limit']:.6g})")


def cmd_run(args) -> int:
    s = _scenario(args)
    data = TrajectoryLog.from_csv(args.data) if args.data else None
    result = run_scenario(s, data)
    paths = write_outputs(result, args.out)
    if args.panels:
        paths.update(emit_plot_data(result.log, args.out))
    m = result.metrics
    print(f"{s.name} [{s.controller.kind}]: settled {1e3 * m.settling_delay:.1f} ms after activation, "
          f"bus rmse {m.bus_rmse:.4g} V, circulating {m.circ_current_ss:.4g} A "
          f"(reduction {100 * m.circ_reduction_vs_equal:.1f}%)")
    _print_verdicts(result.verdicts)
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK if result.passed else EXIT_THRESHOLD


def cmd_metrics(args) -> int:
    s = load_scenario(args.config)
    traj = TrajectoryLog.from_csv(args.log)
    report = compute_metrics(traj, MetricSettings.from_scenario(s))
    verdicts = check_thresholds(report, s.metrics.thresholds)
    text = json.dumps({"metrics": report.to_dict(), "thresholds": verdicts}, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    _print_verdicts(verdicts)
    return EXIT_OK if all(v["passed"] for v in verdicts.values()) else EXIT_THRESHOLD


def cmd_panels(args) -> int:
    for name, p in emit_plot_data(TrajectoryLog.from_csv(args.log), args.out).items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for name, p in sorted(bundled_scenarios().items()):
        print(f"{name}\t{p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfcs", description="Paralleled fuel-cell converter control experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="scenario TOML file or bundled scenario name")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the excitation and simulation seeds")

    p = sub.add_parser("collect", help="record excitation data and check persistency")
    common(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("run", help="run a closed-loop scenario and score it")
    common(p)
    p.add_argument("--controller", choices=CONTROLLER_KINDS, help="override the scenario's controller")
    p.add_argument("--data", help="excitation CSV from 'collect' (default: collect afresh)")
    p.add_argument("--panels", action="store_true", help="also write the four panel CSV files")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="score an existing trajectory CSV against a scenario")
    p.add_argument("--config", required=True)
    p.add_argument("--log", required=True, help="trajectory CSV")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("panels", help="split a trajectory CSV into per-panel CSV files")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_panels)

    p = sub.add_parser("scenarios", help="list bundled scenarios")
    p.set_defaults(func=cmd_scenarios)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PersistencyError, InsufficientDataError, SimulationError, ValueError, KeyError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
