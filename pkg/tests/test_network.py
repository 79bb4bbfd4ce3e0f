import numpy as np
import pytest

from errors import NetworkError
from network import Network, build_consensus_matrix, custom_network, path_network, ring_network, star_network


def test_ring_of_three_with_fixed_scaling():
    consensus = build_consensus_matrix(ring_network(3, scaling=0.25))
    expected = 0.25 * np.array([[2, -1, -1], [-1, 2, -1], [-1, -1, 2]], dtype=float)
    assert np.allclose(consensus.K, expected)
    assert consensus.spectral_radius == pytest.approx(0.75)


def test_path_of_two():
    consensus = build_consensus_matrix(path_network(2, scaling=0.4))
    assert np.allclose(consensus.K, [[0.4, -0.4], [-0.4, 0.4]])
    assert np.allclose(consensus.K.sum(axis=1), 0.0)


def test_auto_scaling_hits_target_radius():
    consensus = build_consensus_matrix(ring_network(10))
    # Power iteration on the Laplacian as an independent check of the largest eigenvalue.
    laplacian = ring_network(10).laplacian()
    v = np.random.default_rng(0).standard_normal(10)
    for _ in range(2000):
        v = laplacian @ v
        v /= np.linalg.norm(v)
    lambda_max = v @ laplacian @ v
    assert consensus.scaling * lambda_max == pytest.approx(0.9, abs=1e-9)
    assert np.max(np.abs(np.linalg.eigvalsh(consensus.K))) == pytest.approx(0.9, abs=1e-9)


def test_consensus_matrix_invariants_with_vector_states():
    consensus = build_consensus_matrix(star_network(4), n=2)
    K = consensus.K
    assert K.shape == (8, 8)
    assert np.array_equal(K, K.T)
    assert np.max(np.abs(K @ np.ones(8))) <= 1e-12
    assert 0.0 <= consensus.spectral_radius < 1.0


def test_disconnected_graph_rejected():
    network = custom_network(4, [(1, 2), (3, 4)])
    with pytest.raises(NetworkError, match="disconnected"):
        build_consensus_matrix(network)


def test_scaling_too_large_names_eigenvalue():
    with pytest.raises(NetworkError, match="largest Laplacian eigenvalue 3"):
        build_consensus_matrix(ring_network(3, scaling=0.5))


@pytest.mark.parametrize(
    "edges, message",
    [
        ([(1, 1, 1.0)], "self-loop"),
        ([(1, 2, 1.0), (2, 1, 1.0)], "duplicate"),
        ([(1, 5, 1.0)], "outside"),
        ([(1, 2, 0.0)], "non-positive"),
    ],
)
def test_invalid_edges(edges, message):
    with pytest.raises(NetworkError, match=message):
        Network(3, tuple(edges))


def test_edges_are_canonical_and_sorted():
    network = custom_network(3, [(3, 1), (2, 1)], weights=[2.0, 1.0])
    assert network.edges == ((1, 2, 1.0), (1, 3, 2.0))
    assert network.has_edge(3, 1)


def test_with_and_without_edge():
    ring = ring_network(5)
    chorded = ring.with_edge(1, 3)
    assert chorded.has_edge(3, 1)
    assert len(chorded.edges) == 6
    assert chorded.without_edge(1, 3).edges == ring.edges
    with pytest.raises(NetworkError, match="already present"):
        ring.with_edge(1, 2)
    with pytest.raises(NetworkError, match="not present"):
        ring.without_edge(1, 3)


def test_removal_that_disconnects_is_rejected():
    with pytest.raises(NetworkError, match="disconnects"):
        path_network(3).without_edge(1, 2)
