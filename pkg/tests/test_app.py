import json
import os
import textwrap

import pandas as pd
import pytest

import app
from app import EXIT_ALARM, EXIT_ERROR, EXIT_OK, main

SCENARIO = textwrap.dedent(
    """\
    name: app-two-agents
    seed: 21
    graph: {type: path, N: 2, scaling: 0.4}
    objectives:
      explicit:
        - {Q: [[1.0]], c: [1.0]}
        - {Q: [[3.0]], c: [2.0]}
    alpha: 0.1
    attack: {node: 1}
    monitor: {node: 2, w: 0.5}
    detector: {epsilon: calibrate, trials: 5}
    run: {horizon: 40, x0_radius: 0.5}
    """
)


def write_scenario(directory, text: str = SCENARIO, name: str = "scenario.yaml") -> str:
    path = os.path.join(str(directory), name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def read_report(out_dir) -> dict:
    with open(os.path.join(str(out_dir), "report.json"), encoding="utf-8") as f:
        return json.load(f)


def test_simulate_without_attack_stays_quiet(tmp_path):
    config = write_scenario(tmp_path)
    out = tmp_path / "out"
    assert main(["simulate", "--config", config, "--out", str(out)]) == EXIT_OK
    report = read_report(out)
    assert report["command"] == "simulate"
    assert report["exit_code"] == EXIT_OK
    assert report["results"]["alarm"] is False
    assert report["results"]["detector"]["epsilon_source"] == "calibrated"
    assert report["outputs"] == {"report.json": "report.json", "trajectory.csv": "trajectory.csv"}
    assert (out / "trajectory.csv").exists()


def test_same_seed_gives_identical_trajectories(tmp_path):
    config = write_scenario(tmp_path)
    for name in ("first", "second"):
        assert main(["simulate", "--config", config, "--out", str(tmp_path / name), "--seed", "3"]) == EXIT_OK
    first = (tmp_path / "first" / "trajectory.csv").read_bytes()
    second = (tmp_path / "second" / "trajectory.csv").read_bytes()
    assert first == second
    assert read_report(tmp_path / "first")["config_digest"] == read_report(tmp_path / "second")["config_digest"]


def test_loud_attack_raises_the_alarm(tmp_path):
    text = SCENARIO.replace("attack: {node: 1}", "attack: {node: 1, kind: custom, samples: [50.0, 50.0, 50.0]}")
    text = text.replace("detector: {epsilon: calibrate, trials: 5}", "detector: {epsilon: 1.0e-3}")
    config = write_scenario(tmp_path, text)
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_ALARM
    report = read_report(tmp_path / "out")
    assert report["results"]["alarm"] is True
    assert report["exit_code"] == EXIT_ALARM


def test_analyze_reports_a_verdict(tmp_path):
    config = write_scenario(tmp_path)
    assert main(["analyze", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_OK
    verdict = read_report(tmp_path / "out")["results"]["verdict"]
    # The monitor on v2 sees the attack on v1 one step after the performance output does.
    assert verdict["delta_m"] == 2 and verdict["delta_p"] == 1
    assert verdict["classification"] in {"UNBOUNDED_VIA_ZERO", "UNBOUNDED_VIA_RELATIVE_DEGREE"}


def test_metric_doubles_with_epsilon(tmp_path):
    values = []
    for epsilon in ("1.0", "2.0"):
        text = SCENARIO.replace("{epsilon: calibrate, trials: 5}", f"{{epsilon: {epsilon}}}")
        config = write_scenario(tmp_path, text, name=f"eps{epsilon}.yaml")
        out = tmp_path / f"out{epsilon}"
        assert main(["metric", "--config", config, "--out", str(out)]) == EXIT_OK
        values.append(read_report(out)["results"]["metric"]["value"])
    if values[0] == "UNBOUNDED":
        assert values[1] == "UNBOUNDED"
    else:
        assert values[1] == pytest.approx(2.0 * values[0], rel=1e-3)


def test_calibrate_reports_the_detector(tmp_path):
    config = write_scenario(tmp_path)
    assert main(["calibrate", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_OK
    detector = read_report(tmp_path / "out")["results"]["detector"]
    assert detector["kappa_source"] == "calibrate"
    assert detector["epsilon"] > 0
    assert len(detector["kappa"]) == 2


def test_invalid_scenario_exits_with_error(tmp_path):
    config = write_scenario(tmp_path, SCENARIO + "colour: blue\n")
    out = tmp_path / "out"
    assert main(["analyze", "--config", config, "--out", str(out)]) == EXIT_ERROR
    assert not (out / "report.json").exists()


def test_sos_needs_a_numeric_epsilon(tmp_path):
    config = write_scenario(tmp_path)
    assert main(["sos", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_ERROR


def test_command_line_options():
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    # Usage errors must not look like a detector alarm.
    for argv in (
        ["metric", "--config", "x.yaml", "--oracle-L", "5,0"],
        ["unknown", "--config", "x.yaml"],
        ["simulate"],
        ["design-edge", "--config", "x.yaml", "--draws", "many"],
    ):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == EXIT_ERROR


@pytest.mark.parametrize("command", ["simulate", "analyze", "calibrate"])
def test_randomized_commands_need_a_seed(tmp_path, command):
    config = write_scenario(tmp_path, SCENARIO.replace("seed: 21\n", ""))
    out = tmp_path / "out"
    assert main([command, "--config", config, "--out", str(out)]) == EXIT_ERROR
    assert not (out / "report.json").exists()
    assert main([command, "--config", config, "--out", str(out), "--seed", "4"]) == EXIT_OK


def test_failed_report_leaves_no_artifacts(tmp_path, monkeypatch):
    def broken(report, out_dir, name="report.json"):
        raise OSError("disk full")

    monkeypatch.setattr(app, "write_report", broken)
    config = write_scenario(tmp_path)
    out = tmp_path / "out"
    assert main(["simulate", "--config", config, "--out", str(out)]) == EXIT_ERROR
    assert not (out / "trajectory.csv").exists()
    assert not (out / "report.json").exists()
    assert not [name for name in os.listdir(out) if name.startswith(".staging-")]


def test_metric_with_distinct_attack_channels(tmp_path):
    text = SCENARIO.replace("attack: {node: 1}", "attack: {node: 1, channels: distinct}")
    text = text.replace("{epsilon: calibrate, trials: 5}", "{epsilon: 1.0}")
    config = write_scenario(tmp_path, text)
    assert main(["metric", "--config", config, "--out", str(tmp_path / "out")]) == EXIT_OK
    metric = read_report(tmp_path / "out")["results"]["metric"]
    assert metric["epsilon"] == 1.0


EDGE_SCENARIO = textwrap.dedent(
    """\
    name: app-edge-draws
    seed: 8
    graph: {type: ring, N: 5}
    objectives: {n: 1, Q_range: [0.5, 5.0], c_range: [0.0, 3.0]}
    alpha: 0.1
    attack: {node: 1}
    monitor: {node: 3, w: 0.5}
    detector: {epsilon: 1.0}
    design:
      belief: {nodes: [1]}
      edges:
        - {edge: [1, 3], cost: 0.5}
    """
)


@pytest.mark.slow
def test_randomized_edge_design_reports_every_draw(tmp_path):
    config = write_scenario(tmp_path, EDGE_SCENARIO)
    out = tmp_path / "out"
    assert main(["design-edge", "--config", config, "--out", str(out), "--draws", "3"]) == EXIT_OK
    design = read_report(out)["results"]["design"]
    assert design["kind"] == "edge-add-randomized"
    assert design["draws"] == 3
    assert [entry["candidate"] for entry in design["candidates"]] == ["none", "e1,3"]
    assert all(len(entry["costs"]) == 3 for entry in design["candidates"])
    assert sum(design["wins"].values()) + design["unresolved"] == 3

    frame = pd.read_csv(out / "design.csv")
    assert len(frame) == 6
    assert sorted(set(frame["draw"])) == [0, 1, 2]


def test_draws_need_random_objectives(tmp_path):
    config = write_scenario(tmp_path, SCENARIO.replace("{epsilon: calibrate, trials: 5}", "{epsilon: 1.0}"))
    assert main(["design-edge", "--config", config, "--out", str(tmp_path / "out"), "--draws", "2"]) == EXIT_ERROR
