import json
from dataclasses import replace

import pytest

from mfcs.cli import main
from mfcs.config import dump_scenario, load_scenario


@pytest.fixture
def short_activation(tmp_path):
    # same plant and controller as the bundled scenario on a shorter timeline
    s = load_scenario("activation")
    s = replace(s, activation_time=0.02, sim=replace(s.sim, duration=0.08))
    return dump_scenario(s, tmp_path / "short.toml")


def test_run_writes_outputs_and_passes(tmp_path, short_activation, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(short_activation), "--out", str(out), "--panels"]) == 0
    report = json.loads((out / "metrics.json").read_text())
    assert report["passed"] is True
    assert report["persistency"]["status"] == "ok"
    assert all(v["passed"] for v in report["thresholds"].values())
    assert (out / "trajectory.csv").exists() and (out / "panel_battery.csv").exists()
    assert "PASS settling_delay_ms_max" in capsys.readouterr().out


def test_threshold_failure_gives_exit_one(tmp_path, short_activation):
    assert main(["run", "--config", str(short_activation), "--out", str(tmp_path / "h"), "--controller", "hold"]) == 1
    report = json.loads((tmp_path / "h" / "metrics.json").read_text())
    assert report["passed"] is False
    # equal terminal voltages cancel the circulating current but leave the bus sagging
    assert not report["thresholds"]["bus_error_frac_max"]["passed"]


def test_invalid_config_writes_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    text = load_scenario("activation")
    dump_scenario(text, bad)
    bad.write_text(bad.read_text().replace("duration_ms = 200.0", "duration_ms = 0.0"))
    out = tmp_path / "never"
    assert main(["run", "--config", str(bad), "--out", str(out)]) == 2
    assert not out.exists()
    assert "sim" in capsys.readouterr().err


def test_collect_then_run_with_data(tmp_path, short_activation):
    data_dir = tmp_path / "data"
    assert main(["collect", "--config", str(short_activation), "--out", str(data_dir), "--seed", "4"]) == 0
    csv_path = data_dir / "excitation.csv"
    assert len(csv_path.read_text().splitlines()) == 31
    assert main(["run", "--config", str(short_activation), "--out", str(tmp_path / "r"), "--data",
                 str(csv_path)]) == 0


def test_seed_is_reproducible(tmp_path, short_activation):
    for name in ("a", "b"):
        assert main(["run", "--config", str(short_activation), "--out", str(tmp_path / name), "--seed", "9"]) == 0
    assert (tmp_path / "a" / "trajectory.csv").read_text() == (tmp_path / "b" / "trajectory.csv").read_text()


def test_metrics_and_panels_subcommands(tmp_path, short_activation):
    main(["run", "--config", str(short_activation), "--out", str(tmp_path / "r")])
    log = tmp_path / "r" / "trajectory.csv"
    assert main(["metrics", "--config", str(short_activation), "--log", str(log), "--out",
                 str(tmp_path / "m.json")]) == 0
    again = json.loads((tmp_path / "m.json").read_text())
    first = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert again["metrics"]["circ_current_ss"] == first["metrics"]["circ_current_ss"]
    assert main(["panels", "--log", str(log), "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("panel_*.csv"))) == 4


def test_missing_log_is_an_error(tmp_path):
    assert main(["panels", "--log", str(tmp_path / "none.csv"), "--out", str(tmp_path / "p")]) == 2


def test_scenarios_listing(capsys):
    assert main(["scenarios"]) == 0
    assert "sine-follow" in capsys.readouterr().out
