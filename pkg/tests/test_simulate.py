import numpy as np
import pytest

from errors import DimensionError, DivergenceError
from model import QuadraticObjective, assemble_system, equilibrium, global_optimum, random_objectives
from network import ring_network
from simulate import (
    alarm,
    attack_samples,
    calibrate_epsilon,
    calibrate_kappa,
    consensus_error,
    decompose,
    detector_energy,
    detector_log,
    performance_energy,
    settle_step,
    simulate,
    trajectory_frame,
)


def test_nominal_run_converges_to_optimum():
    objectives = random_objectives(5, 1, (0.5, 2.0), (-1.0, 1.0), seed=3)
    system = assemble_system(ring_network(5), objectives, 0.05, attack_node=1, monitor_node=2)
    x0 = np.random.default_rng(0).standard_normal(system.states)
    trajectory = simulate(system, x0, horizon=1000)
    x_star = global_optimum(objectives)
    assert np.max(np.abs(trajectory.x_part()[-1, :, 0] - x_star[0])) < 1e-6


def test_superposition_holds_per_step(system5):
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal(system5.states)
    attack = rng.standard_normal((1000, 1))
    full = simulate(system5, x0, attack, horizon=1000, include_offset=False, truncate=False)
    nominal, attacked = decompose(system5, x0, attack, 1000)
    combined = nominal + attacked
    scale = np.maximum(1.0, np.abs(full.states))
    assert np.max(np.abs(combined.states - full.states) / scale) <= 1e-9


def test_consensus_states_are_fixed_points(ring5):
    objectives = [QuadraticObjective(Q=[[0.0]], c=[0.0])] * 5
    system = assemble_system(ring5, objectives, 0.1, 1, 1)
    x0 = np.concatenate([np.full(5, 2.5), np.full(5, -1.0)])
    trajectory = simulate(system, x0, horizon=20)
    assert np.allclose(trajectory.states, x0)


def test_attack_samples_padding_and_validation():
    samples = attack_samples([1.0, 2.0], steps=4, n=1)
    assert samples.ravel().tolist() == [1.0, 2.0, 0.0, 0.0]
    assert attack_samples(None, 3, 2).shape == (3, 2)
    with pytest.raises(DimensionError):
        attack_samples(np.ones((3, 2)), 3, 1)


def test_detector_energy_window_is_inclusive(system5):
    trajectory = simulate(system5, np.ones(system5.states), horizon=10)
    squares = np.sum(trajectory.outputs_m ** 2, axis=1)
    assert detector_energy(trajectory) == pytest.approx(np.sum(squares[1:11]))
    assert detector_energy(trajectory, (2, 4)) == pytest.approx(np.sum(squares[2:5]))
    assert performance_energy(trajectory, (0, 0)) == pytest.approx(np.sum(trajectory.outputs_p[0] ** 2))
    with pytest.raises(DimensionError, match="empty"):
        detector_energy(trajectory, (5, 4))
    with pytest.raises(DimensionError, match="outside"):
        detector_energy(trajectory, (1, 11))


def test_alarm_is_strict():
    assert not alarm(1.0, 1.0)
    assert alarm(1.0 + 1e-12, 1.0)


def test_truncation_and_divergence(ring5, objectives5):
    # A large step size makes the loop unstable.
    system = assemble_system(ring5, objectives5, 5.0, 1, 2)
    x0 = np.ones(system.states)
    trajectory = simulate(system, x0, horizon=5000)
    assert trajectory.truncated
    assert trajectory.horizon < 5000
    with pytest.raises(DivergenceError) as info:
        simulate(system, x0, horizon=5000, truncate=False)
    assert info.value.step > 0


def test_kappa_cancels_settled_output(system5):
    x_eq = equilibrium(system5)
    x0 = x_eq.copy()
    x0[:5] += 0.1  # x only, so the conserved tracker sum is unchanged
    kappa = calibrate_kappa(system5, x0, k1=400)
    assert np.allclose(kappa, system5.C_m @ x_eq, atol=1e-6)
    assert settle_step(system5, x0) >= 1


def test_calibrated_epsilon_bounds_the_trials(system5):
    system = system5.with_detector(kappa=system5.C_m @ equilibrium(system5))
    x_eq = equilibrium(system)
    rng = np.random.default_rng(4)
    starts = [x_eq + rng.standard_normal(system.states) for _ in range(5)]
    epsilon = calibrate_epsilon(system, 5, 30, margin=2.0, initial_states=starts)
    energies = [detector_energy(simulate(system, x0, horizon=30)) for x0 in starts]
    assert epsilon == pytest.approx(2.0 * max(energies))
    assert not any(detector_log(simulate(system, x0, horizon=30), epsilon).alarm for x0 in starts)


def test_calibration_is_the_same_serial_and_threaded(system5):
    serial = calibrate_epsilon(system5, 8, 20, seed=11, workers=1)
    threaded = calibrate_epsilon(system5, 8, 20, seed=11, workers=4)
    assert serial == threaded


def test_calibration_arguments_validated(system5):
    with pytest.raises(DimensionError):
        calibrate_epsilon(system5, 0, 10)
    with pytest.raises(DimensionError):
        calibrate_epsilon(system5, 3, 10, margin=0.5)


def test_trajectory_frame_layout(system5):
    trajectory = simulate(system5, np.ones(system5.states), horizon=3)
    frame = trajectory_frame(trajectory, epsilon=0.0)
    assert list(frame.columns) == ["k", "agent", "coordinate", "x", "z", "y_m_norm", "y_p_norm", "alarm"]
    assert len(frame) == 4 * 5
    assert not frame.loc[frame["k"] == 0, "alarm"].any()
    first = frame[(frame["k"] == 2) & (frame["agent"] == 3)].iloc[0]
    assert first["x"] == pytest.approx(trajectory.states[2, 2])
    assert first["z"] == pytest.approx(trajectory.states[2, 7])


def test_consensus_error_vanishes_at_consensus(system5):
    trajectory = simulate(system5, np.zeros(system5.states), horizon=1)
    assert consensus_error(trajectory)[0] == 0.0


def test_distinct_channels_with_equal_components_match_shared(ring5, objectives5):
    shared = assemble_system(ring5, objectives5, 0.1, attack_node=2, monitor_node=4)
    distinct = assemble_system(ring5, objectives5, 0.1, attack_node=2, monitor_node=4, attack_channels="distinct")
    attack = np.random.default_rng(7).standard_normal((40, 1))
    x0 = np.ones(shared.states)
    one = simulate(shared, x0, attack, horizon=40)
    two = simulate(distinct, x0, np.hstack([attack, attack]), horizon=40)
    assert np.allclose(one.states, two.states, rtol=0.0, atol=1e-12)
    assert np.allclose(one.outputs_m, two.outputs_m, rtol=0.0, atol=1e-12)
    with pytest.raises(DimensionError, match="2"):
        simulate(distinct, x0, attack, horizon=40)
