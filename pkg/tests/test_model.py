import numpy as np
import pytest
import scipy.linalg

from errors import DimensionError, SingularObjectiveError
from model import (
    AttackChannels,
    QuadraticObjective,
    assemble_system,
    build_performance_output,
    equilibrium,
    global_optimum,
    monitor_weights,
    random_objectives,
)
from network import build_consensus_matrix, ring_network


def test_performance_output_two_agents():
    assert np.array_equal(build_performance_output(2, 1), [[1.0, -1.0, 0.0, 0.0]])


def test_performance_output_shape_and_consensus_kernel():
    C_p = build_performance_output(3, 2)
    assert C_p.shape == (4, 12)
    consensus_state = np.concatenate([np.tile([0.3, -1.2], 3), np.arange(6.0)])
    assert np.allclose(C_p @ consensus_state, 0.0)
    assert not np.allclose(C_p @ np.arange(12.0), 0.0)


def test_performance_output_needs_two_agents():
    with pytest.raises(DimensionError):
        build_performance_output(1, 1)


def test_zero_objectives_give_pure_consensus_blocks(path2):
    objectives = [QuadraticObjective(Q=[[0.0]], c=[0.0])] * 2
    system = assemble_system(path2, objectives, alpha=0.3, attack_node=1, monitor_node=2)
    K = build_consensus_matrix(path2).K
    identity = np.eye(2)
    assert np.allclose(system.A, np.block([[identity - K, -K], [K, identity]]))
    assert np.allclose(system.c, 0.0)


def test_input_matrix_hits_attacked_block_twice(ring5, objectives5):
    system = assemble_system(ring5, objectives5, 0.1, attack_node=4, monitor_node=1)
    assert system.B.shape == (10, 1)
    assert np.count_nonzero(system.B) == 2
    assert system.B[3, 0] == 1.0 and system.B[8, 0] == 1.0
    assert np.array_equal(system.B[:5], system.B[5:])


def test_distinct_channels_give_one_input_per_block(ring5, objectives5):
    shared = assemble_system(ring5, objectives5, 0.1, attack_node=4, monitor_node=1)
    distinct = assemble_system(ring5, objectives5, 0.1, attack_node=4, monitor_node=1, attack_channels="distinct")
    assert shared.attack_channels == AttackChannels.SHARED and shared.attack_inputs == 1
    assert distinct.attack_channels == AttackChannels.DISTINCT
    assert distinct.B.shape == (10, 2) and distinct.attack_inputs == 2
    assert np.array_equal(distinct.B, scipy.linalg.block_diag(shared.B[:5], shared.B[5:]))
    assert np.array_equal(distinct.B.sum(axis=1, keepdims=True), shared.B)
    assert np.array_equal(distinct.A, shared.A) and np.array_equal(distinct.C_m, shared.C_m)


def test_unknown_attack_channels_rejected(path2, two_agents):
    with pytest.raises(DimensionError, match="channels"):
        assemble_system(path2, two_agents[1], 0.1, 1, 2, attack_channels="both")


def test_block_structure_and_constant(system5, objectives5):
    Q = np.diag([objective.Q[0, 0] for objective in objectives5])
    c = np.array([objective.c[0] for objective in objectives5])
    K = build_consensus_matrix(ring_network(5)).K
    identity = np.eye(5)
    assert np.allclose(system5.A[:5, :5], identity - K - 0.1 * Q)
    assert np.allclose(system5.A[:5, 5:], -K)
    assert np.allclose(system5.A[5:, :5], K)
    assert np.allclose(system5.A[5:, 5:], identity)
    assert np.allclose(system5.c, np.concatenate([-0.1 * c, np.zeros(5)]))
    assert np.allclose(system5.kappa, 0.0) and system5.epsilon == 0.0


def test_monitor_output_weights_state_and_tracker(ring5, objectives5):
    system = assemble_system(ring5, objectives5, 0.1, attack_node=1, monitor_node=3, w=0.25)
    expected = np.zeros((2, 10))
    expected[0, 2] = 0.75
    expected[1, 7] = 0.25
    assert np.allclose(system.C_m, expected)
    assert np.allclose(system.C_m, system.W @ system.C_check)


def test_ten_agent_ring_is_marginally_stable():
    objectives = random_objectives(10, 1, (0.0, 10.0), (0.0, 30.0), seed=1)
    system = assemble_system(ring_network(10), objectives, 1e-6, attack_node=8, monitor_node=4, w=0.0)
    assert system.A.shape == (20, 20)
    assert np.max(np.abs(np.linalg.eigvals(system.A))) <= 1 + 1e-9


def test_mixed_dimensions_rejected(path2):
    objectives = [QuadraticObjective(Q=np.eye(2), c=[0.0, 0.0]), QuadraticObjective(Q=[[1.0]], c=[0.0])]
    with pytest.raises(DimensionError, match="mixed dimensions"):
        assemble_system(path2, objectives, 0.1, 1, 2)


@pytest.mark.parametrize("attack_node, monitor_node", [(0, 1), (1, 3)])
def test_nodes_out_of_range(path2, two_agents, attack_node, monitor_node):
    _, objectives = two_agents
    with pytest.raises(DimensionError, match="outside"):
        assemble_system(path2, objectives, 0.1, attack_node, monitor_node)


def test_objective_validation():
    with pytest.raises(DimensionError, match="symmetric"):
        QuadraticObjective(Q=[[1.0, 2.0], [0.0, 1.0]], c=[0.0, 0.0])
    with pytest.raises(DimensionError, match="positive semidefinite"):
        QuadraticObjective(Q=[[-1.0]], c=[0.0])
    with pytest.raises(DimensionError):
        monitor_weights(1.5, 1)


def test_global_optimum_and_equilibrium(two_agents):
    network, objectives = two_agents
    x_star = global_optimum(objectives)
    assert x_star == pytest.approx([-0.75], abs=1e-12)

    system = assemble_system(network, objectives, 0.1, 1, 2)
    x_eq = equilibrium(system)
    assert np.allclose(x_eq[:2], x_star[0], atol=1e-9)
    assert np.allclose(system.A @ x_eq + system.c, x_eq, atol=1e-12)


def test_global_optimum_residual_on_random_instance():
    objectives = random_objectives(6, 3, (0.5, 2.0), (-1.0, 1.0), seed=42)
    Q_sum = sum(objective.Q for objective in objectives)
    c_sum = sum(objective.c for objective in objectives)
    x_star = global_optimum(objectives)
    assert np.max(np.abs(Q_sum @ x_star + c_sum)) <= 1e-10
    assert np.allclose(x_star, np.linalg.solve(Q_sum, -c_sum))


def test_singular_sum_recommends_least_squares():
    objectives = [QuadraticObjective(Q=np.diag([1.0, 0.0]), c=[1.0, 0.0])] * 2
    with pytest.raises(SingularObjectiveError, match="least-squares"):
        global_optimum(objectives)
    assert np.allclose(global_optimum(objectives, least_squares=True), [-1.0, 0.0])


def test_random_objectives_are_deterministic():
    first = random_objectives(4, 2, (0.0, 1.0), (0.0, 1.0), seed=9)
    second = random_objectives(4, 2, (0.0, 1.0), (0.0, 1.0), seed=9)
    for a, b in zip(first, second):
        assert np.array_equal(a.Q, b.Q) and np.array_equal(a.c, b.c)
        assert np.min(np.linalg.eigvalsh(a.Q)) >= -1e-10


def test_system_arrays_are_read_only(system5):
    with pytest.raises(ValueError):
        system5.A[0, 0] = 1.0
