import glob
import os
import textwrap

import numpy as np
import pytest

from errors import ConfigError
from metric import MetricMode
from model import AttackChannels
from scenario import ScenarioConfig, initial_state, load_scenario

EXPLICIT = textwrap.dedent(
    """\
    name: two-agents
    graph: {type: path, N: 2, scaling: 0.4}
    objectives:
      explicit:
        - {Q: [[1.0]], c: [1.0]}
        - {Q: [[3.0]], c: [2.0]}
    alpha: 0.1
    attack: {node: 1}
    monitor: {node: 2, w: 0.5}
    detector: {epsilon: 1e-6}
    """
)


def test_unknown_key_reports_line_and_field():
    text = "graph:\n  type: ring\n  N: 5\n  colour: red\nalpha: 0.1\n"
    with pytest.raises(ConfigError) as info:
        ScenarioConfig.from_text(text)
    assert info.value.line == 4
    assert info.value.field == "graph.colour"
    assert "unknown key 'colour'" in str(info.value)


def test_unknown_key_inside_list_items():
    text = EXPLICIT.replace("{Q: [[3.0]], c: [2.0]}", "{Q: [[3.0]], c: [2.0], d: 1}")
    with pytest.raises(ConfigError, match="objectives.explicit\\[1\\].d"):
        ScenarioConfig.from_text(text)


def test_explicit_objectives_need_no_seed():
    scenario = ScenarioConfig.from_text(EXPLICIT)
    objectives = scenario.objectives()
    assert [float(o.Q[0, 0]) for o in objectives] == [1.0, 3.0]
    # An unsuffixed exponent is read as a string by YAML and coerced here.
    assert scenario.epsilon == pytest.approx(1e-6)
    system = scenario.system()
    assert system.states == 4


def test_random_objectives_need_a_seed():
    scenario = ScenarioConfig.from_dict(
        {"graph": {"type": "ring", "N": 3}, "objectives": {"Q_range": [0.0, 1.0], "c_range": [0.0, 1.0]}, "alpha": 0.1}
    )
    with pytest.raises(ConfigError, match="master seed"):
        scenario.objectives()
    seeded = scenario.with_overrides(seed=4)
    assert len(seeded.objectives()) == 3


@pytest.mark.parametrize(
    "patch, field",
    [
        ({"alpha": -1.0}, "alpha"),
        ({"graph": {"type": "grid", "N": 3}}, "graph.type"),
        ({"attack": {"kind": "replay"}}, "attack.kind"),
        ({"attack": {"kind": "custom"}}, "attack"),
        ({"run": {"mode": "fast"}}, "run.mode"),
        ({"run": {"horizon": 0}}, "run.horizon"),
        ({"objectives": {"Q_range": [2.0, 1.0], "c_range": [0.0, 1.0]}}, "objectives.Q_range"),
        ({"detector": {"epsilon": "lots"}}, "detector.epsilon"),
        ({"attack": {"channels": "both"}}, "attack.channels"),
        ({"design": {"draws": 0}}, "design.draws"),
    ],
)
def test_invalid_values_name_the_field(patch, field):
    data = {
        "seed": 1,
        "graph": {"type": "ring", "N": 3},
        "objectives": {"Q_range": [0.0, 1.0], "c_range": [0.0, 1.0]},
        "alpha": 0.1,
    }
    data.update(patch)
    with pytest.raises(ConfigError) as info:
        ScenarioConfig.from_dict(data)
    assert info.value.field == field


def test_malformed_and_missing_files(tmp_path):
    with pytest.raises(ConfigError, match="malformed"):
        ScenarioConfig.from_text("graph: {type: ring\n")
    with pytest.raises(ConfigError, match="not found"):
        load_scenario(str(tmp_path / "absent.yaml"))
    with pytest.raises(ConfigError, match="empty"):
        ScenarioConfig.from_text("")


def test_overrides_replace_run_settings():
    scenario = ScenarioConfig.from_text(EXPLICIT).with_overrides(seed=9, horizon=20, oracle_L=[5, 10], mode="cyclo")
    assert scenario.seed == 9
    assert scenario.horizon == 20
    assert scenario.oracle_horizons == [5, 10]
    assert scenario.mode == MetricMode.CYCLO
    assert ScenarioConfig.from_text(EXPLICIT).mode is None
    assert ScenarioConfig.from_text(EXPLICIT).horizon == 100


def test_digest_ignores_key_order():
    first = ScenarioConfig.from_dict({"seed": 1, "alpha": 0.1, "graph": {"type": "ring", "N": 3},
                                      "objectives": {"Q_range": [0, 1], "c_range": [0, 1]}})
    second = ScenarioConfig.from_dict({"objectives": {"c_range": [0, 1], "Q_range": [0, 1]},
                                       "graph": {"N": 3, "type": "ring"}, "alpha": 0.1, "seed": 1})
    assert first.digest() == second.digest()
    assert first.with_overrides(seed=2).digest() != first.digest()


def test_seed_fan_out_is_stable():
    scenario = ScenarioConfig.from_text(EXPLICIT).with_overrides(seed=3)
    assert scenario.sub_seed("x0") == scenario.sub_seed("x0")
    assert scenario.sub_seed("x0") != scenario.sub_seed("objectives")


def test_initial_state_sits_on_the_requested_sphere():
    scenario = ScenarioConfig.from_text(EXPLICIT + "run: {x0_radius: 0.25}\n").with_overrides(seed=3)
    system = scenario.system()
    x_eq = np.arange(4.0)
    x0 = initial_state(scenario, system, x_eq)
    assert np.linalg.norm(x0 - x_eq) == pytest.approx(0.25)
    assert np.array_equal(x0, initial_state(scenario, system, x_eq))


def test_design_views(scenario_dir):
    monitor = load_scenario(os.path.join(scenario_dir, "example4.yaml"))
    belief = monitor.belief()
    assert belief.nodes == (1, 4) and belief.probabilities == (0.5, 0.5)
    assert monitor.belief_scale == 2.0
    assert monitor.monitor_candidates() is None

    edge = load_scenario(os.path.join(scenario_dir, "example5.yaml"))
    assert [(c.edge, c.cost) for c in edge.edge_candidates()] == [((1, 4), 40.0), ((3, 5), 150.0)]
    assert edge.edge_mode.value == "add"

    sos = load_scenario(os.path.join(scenario_dir, "sos_example.yaml"))
    polynomials = sos.poly_objectives()
    assert len(polynomials) == 2 and polynomials[0].degree == 4


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(os.path.dirname(os.path.dirname(__file__)), "scenarios", "*.yaml"))))
def test_shipped_scenarios_validate(path):
    scenario = load_scenario(path)
    network = scenario.network()
    assert network.node_count == int(scenario.section("graph")["N"])
    assert len(scenario.objectives()) == network.node_count


def test_randomized_steps_need_a_seed():
    scenario = ScenarioConfig.from_text(EXPLICIT)
    assert scenario.seed is None
    with pytest.raises(ConfigError, match="'x0' step is randomized") as info:
        initial_state(scenario, scenario.system(), np.zeros(4))
    assert info.value.field == "seed"
    for purpose in ("calibration", "zeros", "perturbation", "replay"):
        with pytest.raises(ConfigError, match="master seed"):
            scenario.sub_seed(purpose)


def test_attack_channels_reach_the_system():
    assert ScenarioConfig.from_text(EXPLICIT).attack_channels == AttackChannels.SHARED
    scenario = ScenarioConfig.from_text(EXPLICIT.replace("attack: {node: 1}", "attack: {node: 1, channels: distinct}"))
    assert scenario.attack_channels == AttackChannels.DISTINCT
    system = scenario.system()
    assert system.attack_channels == AttackChannels.DISTINCT
    assert system.B.shape == (4, 2)


def test_objective_draws_are_independent_and_repeatable():
    scenario = ScenarioConfig.from_dict(
        {"seed": 6, "graph": {"type": "ring", "N": 4}, "objectives": {"Q_range": [0.0, 1.0], "c_range": [0.0, 1.0]},
         "alpha": 0.1}
    )
    assert scenario.has_random_objectives and scenario.draws == 1
    first = [o.Q[0, 0] for o in scenario.objectives(draw=0)]
    second = [o.Q[0, 0] for o in scenario.objectives(draw=1)]
    assert first != second
    assert first == [o.Q[0, 0] for o in scenario.objectives(draw=0)]
    assert scenario.with_overrides(draws=7).draws == 7
    assert not ScenarioConfig.from_text(EXPLICIT).has_random_objectives
