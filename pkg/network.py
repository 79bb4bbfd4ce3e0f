import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components

from config import Config
from errors import NetworkError

logger = logging.getLogger(__name__)

AUTO_SCALE_TARGET = 0.9

Edge = Tuple[int, int]
Scaling = Union[float, str]


def _canonical_edge(i: int, j: int) -> Edge:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class Network:
    """Weighted undirected graph on nodes 1..N with the consensus scaling s."""

    node_count: int
    edges: Tuple[Tuple[int, int, float], ...]
    scaling: Scaling = "auto"

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise NetworkError(f"node_count must be positive, got {self.node_count}")
        if isinstance(self.scaling, str):
            if self.scaling != "auto":
                raise NetworkError(f"scaling must be a positive number or 'auto', got '{self.scaling}'")
        elif not self.scaling > 0:
            raise NetworkError(f"scaling must be positive, got {self.scaling}")

        seen = set()
        canonical = []
        for i, j, weight in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise NetworkError(f"self-loop on node {i} is not allowed")
            for node in (i, j):
                if not 1 <= node <= self.node_count:
                    raise NetworkError(f"edge ({i}, {j}) references node {node} outside 1..{self.node_count}")
            if not weight > 0:
                raise NetworkError(f"edge ({i}, {j}) has non-positive weight {weight}")
            key = _canonical_edge(i, j)
            if key in seen:
                raise NetworkError(f"duplicate edge {key}")
            seen.add(key)
            canonical.append((key[0], key[1], float(weight)))
        object.__setattr__(self, "edges", tuple(sorted(canonical)))

    @property
    def edge_set(self) -> List[Edge]:
        return [(i, j) for i, j, _ in self.edges]

    def has_edge(self, i: int, j: int) -> bool:
        return _canonical_edge(i, j) in set(self.edge_set)

    def weighted_adjacency(self) -> np.ndarray:
        adjacency = np.zeros((self.node_count, self.node_count))
        for i, j, weight in self.edges:
            adjacency[i - 1, j - 1] = weight
            adjacency[j - 1, i - 1] = weight
        return adjacency

    def laplacian(self) -> np.ndarray:
        adjacency = self.weighted_adjacency()
        return np.diag(adjacency.sum(axis=1)) - adjacency

    def is_connected(self) -> bool:
        if self.node_count == 1:
            return True
        count, _ = connected_components(self.weighted_adjacency() > 0, directed=False)
        return count == 1

    def with_edge(self, i: int, j: int, weight: float = 1.0) -> "Network":
        if self.has_edge(i, j):
            raise NetworkError(f"edge {_canonical_edge(i, j)} is already present")
        return Network(self.node_count, self.edges + ((i, j, weight),), self.scaling)

    def without_edge(self, i: int, j: int) -> "Network":
        key = _canonical_edge(i, j)
        if not self.has_edge(i, j):
            raise NetworkError(f"edge {key} is not present")
        remaining = tuple(edge for edge in self.edges if (edge[0], edge[1]) != key)
        reduced = Network(self.node_count, remaining, self.scaling)
        if not reduced.is_connected():
            raise NetworkError(f"removing edge {key} disconnects the graph")
        return reduced


@dataclass(frozen=True)
class ConsensusMatrix:
    K: np.ndarray
    scaling: float
    laplacian_eigenvalues: np.ndarray
    n: int

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.laplacian_eigenvalues)) * self.scaling)


def ring_network(N: int, weight: float = 1.0, scaling: Scaling = "auto") -> Network:
    if N < 2:
        raise NetworkError(f"a ring needs at least 2 nodes, got {N}")
    if N == 2:
        return Network(2, ((1, 2, weight),), scaling)
    return Network(N, tuple((i, i % N + 1, weight) for i in range(1, N + 1)), scaling)


def path_network(N: int, weight: float = 1.0, scaling: Scaling = "auto") -> Network:
    return Network(N, tuple((i, i + 1, weight) for i in range(1, N)), scaling)


def star_network(N: int, weight: float = 1.0, scaling: Scaling = "auto", center: int = 1) -> Network:
    return Network(N, tuple((center, j, weight) for j in range(1, N + 1) if j != center), scaling)


def custom_network(
    N: int,
    edges: Iterable[Sequence[int]],
    weights: Optional[Sequence[float]] = None,
    scaling: Scaling = "auto",
) -> Network:
    edge_list = [tuple(edge) for edge in edges]
    if weights is None:
        weights = [1.0] * len(edge_list)
    if len(weights) != len(edge_list):
        raise NetworkError(f"{len(edge_list)} edges but {len(weights)} weights")
    return Network(N, tuple((int(e[0]), int(e[1]), float(w)) for e, w in zip(edge_list, weights)), scaling)


def build_consensus_matrix(network: Network, n: int = 1, config: Optional[Config] = None) -> ConsensusMatrix:
    """K = s·L_w ⊗ I_n, validated for symmetry, zero row sums and ρ(K) < 1."""
    config = config or Config.default()
    if not network.is_connected():
        raise NetworkError(f"graph with {network.node_count} nodes and {len(network.edges)} edges is disconnected")

    laplacian = network.laplacian()
    eigenvalues = scipy.linalg.eigvalsh(laplacian)
    lambda_max = float(eigenvalues[-1])

    if network.scaling == "auto":
        scaling = AUTO_SCALE_TARGET / lambda_max if lambda_max > 0 else 1.0
    else:
        scaling = float(network.scaling)
        if scaling * lambda_max >= 1.0:
            raise NetworkError(
                f"scaling {scaling:g} times the largest Laplacian eigenvalue {lambda_max:.12g} "
                f"is {scaling * lambda_max:.12g} >= 1"
            )

    K = np.kron(scaling * laplacian, np.eye(n))
    if np.max(np.abs(K - K.T)) > 0:
        raise NetworkError("consensus matrix is not symmetric")
    row_sums = np.max(np.abs(K.sum(axis=1))) if K.size else 0.0
    if row_sums > max(config.symmetry_tol, 1e-15 * K.shape[0]):
        raise NetworkError(f"consensus matrix row sums deviate from zero by {row_sums:.3e}")

    consensus = ConsensusMatrix(K=K, scaling=scaling, laplacian_eigenvalues=eigenvalues, n=n)
    logger.debug(
        "Consensus matrix built: N=%d, n=%d, s=%.6g, rho(K)=%.6g",
        network.node_count,
        n,
        scaling,
        consensus.spectral_radius,
    )
    return consensus
