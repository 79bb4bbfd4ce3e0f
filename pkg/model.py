import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.stats import ortho_group

from config import Config
from errors import DimensionError, SingularObjectiveError
from network import ConsensusMatrix, Network, build_consensus_matrix

logger = logging.getLogger(__name__)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


class AttackChannels(str, Enum):
    """Whether one attack vector drives both x and z at the attacked node, or one each."""

    SHARED = "shared"
    DISTINCT = "distinct"


@dataclass(frozen=True)
class QuadraticObjective:
    """f_i(x) = ½ xᵀQ_i x + c_iᵀx."""

    Q: np.ndarray
    c: np.ndarray

    def __post_init__(self) -> None:
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        c = np.atleast_1d(np.asarray(self.c, dtype=float)).ravel()
        if Q.shape[0] != Q.shape[1]:
            raise DimensionError(f"Q must be square, got shape {Q.shape}")
        if c.shape[0] != Q.shape[0]:
            raise DimensionError(f"c has length {c.shape[0]} but Q is {Q.shape[0]}x{Q.shape[0]}")
        if np.max(np.abs(Q - Q.T)) > 1e-12 * max(1.0, np.max(np.abs(Q))):
            raise DimensionError("Q must be symmetric")
        Q = 0.5 * (Q + Q.T)
        if Q.size and scipy.linalg.eigvalsh(Q)[0] < -1e-10:
            raise DimensionError(f"Q must be positive semidefinite, min eigenvalue {scipy.linalg.eigvalsh(Q)[0]:.3e}")
        object.__setattr__(self, "Q", _frozen(Q))
        object.__setattr__(self, "c", _frozen(c))

    @property
    def dimension(self) -> int:
        return self.Q.shape[0]

    def value(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.c @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.Q @ np.asarray(x, dtype=float) + self.c


@dataclass(frozen=True)
class SystemTriple:
    """Strictly proper (A, B, C, 0)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if C.ndim == 1:
            C = C.reshape(1, -1)
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise DimensionError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
        if C.shape[1] != A.shape[0]:
            raise DimensionError(f"C has {C.shape[1]} columns, A has {A.shape[0]}")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))
        object.__setattr__(self, "C", _frozen(C))

    @property
    def states(self) -> int:
        return self.A.shape[0]

    @property
    def inputs(self) -> int:
        return self.B.shape[1]

    @property
    def outputs(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class AggregatedSystem:
    """Closed loop x̄[k+1] = Āx̄[k] + B̄a[k] + c̄ with performance and monitor outputs."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    C_p: np.ndarray
    C_m: np.ndarray
    C_check: np.ndarray
    W: np.ndarray
    alpha: float
    attack_node: int
    monitor_node: int
    w: np.ndarray
    N: int
    n: int
    kappa: np.ndarray = field(default_factory=lambda: np.zeros(0))
    epsilon: float = 0.0
    attack_channels: AttackChannels = AttackChannels.SHARED

    def __post_init__(self) -> None:
        for name in ("A", "B", "c", "C_p", "C_m", "C_check", "W", "w"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        kappa = np.zeros(2 * self.n) if np.size(self.kappa) == 0 else np.asarray(self.kappa, dtype=float)
        if kappa.shape != (2 * self.n,):
            raise DimensionError(f"kappa must have length {2 * self.n}, got {kappa.shape}")
        object.__setattr__(self, "kappa", _frozen(kappa))
        if self.epsilon < 0:
            raise DimensionError(f"epsilon must be nonnegative, got {self.epsilon}")

    @property
    def states(self) -> int:
        return self.A.shape[0]

    @property
    def attack_inputs(self) -> int:
        """n for shared channels, 2n when x and z are attacked separately."""
        return self.B.shape[1]

    def monitor_triple(self) -> SystemTriple:
        return SystemTriple(self.A, self.B, self.C_m)

    def performance_triple(self) -> SystemTriple:
        return SystemTriple(self.A, self.B, self.C_p)

    def with_detector(self, kappa: Optional[np.ndarray] = None, epsilon: Optional[float] = None) -> "AggregatedSystem":
        changes = {}
        if kappa is not None:
            changes["kappa"] = np.asarray(kappa, dtype=float)
        if epsilon is not None:
            changes["epsilon"] = float(epsilon)
        return replace(self, **changes)

    def split_state(self, x_bar: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (x, z) as N×n arrays."""
        half = self.N * self.n
        x_bar = np.asarray(x_bar, dtype=float)
        return x_bar[:half].reshape(self.N, self.n), x_bar[half:].reshape(self.N, self.n)


def build_performance_output(N: int, n: int) -> np.ndarray:
    """Chain differences y_{p,i} = x_i − x_{i+1}, zero on the z partition."""
    if N < 2:
        raise DimensionError(f"performance output needs N >= 2, got {N}")
    difference = np.zeros((N - 1, N))
    for i in range(N - 1):
        difference[i, i] = 1.0
        difference[i, i + 1] = -1.0
    return np.hstack([np.kron(difference, np.eye(n)), np.zeros(((N - 1) * n, N * n))])


def monitor_selector(N: int, n: int, node: int) -> np.ndarray:
    """Č_m: picks (x_m, z_m) out of x̄."""
    selector = np.zeros((2 * n, 2 * N * n))
    offset = (node - 1) * n
    selector[:n, offset:offset + n] = np.eye(n)
    selector[n:, N * n + offset:N * n + offset + n] = np.eye(n)
    return selector


def monitor_weights(w: Union[float, Sequence[float]], n: int) -> np.ndarray:
    weights = np.full(n, float(w)) if np.isscalar(w) else np.asarray(w, dtype=float).ravel()
    if weights.shape != (n,):
        raise DimensionError(f"monitor weights need {n} entries, got {weights.shape[0]}")
    if np.any(weights < 0) or np.any(weights > 1):
        raise DimensionError(f"monitor weights must lie in [0, 1], got {weights.tolist()}")
    return weights


def stack_objectives(objectives: Sequence[QuadraticObjective]) -> Tuple[np.ndarray, np.ndarray]:
    """Block-diagonal Q and stacked c."""
    if not objectives:
        raise DimensionError("at least one objective is required")
    dims = {objective.dimension for objective in objectives}
    if len(dims) != 1:
        raise DimensionError(f"objectives have mixed dimensions {sorted(dims)}")
    Q = scipy.linalg.block_diag(*[objective.Q for objective in objectives])
    c = np.concatenate([objective.c for objective in objectives])
    return Q, c


def assemble_system(
    network: Network,
    objectives: Sequence[QuadraticObjective],
    alpha: float,
    attack_node: int,
    monitor_node: int,
    w: Union[float, Sequence[float]] = 0.5,
    attack_gain: int = 1,
    consensus: Optional[ConsensusMatrix] = None,
    config: Optional[Config] = None,
    attack_channels: Union[str, AttackChannels] = AttackChannels.SHARED,
) -> AggregatedSystem:
    """Aggregate the consensus-optimization updates of every agent into one linear system.

    With shared channels B̄ = [B; B] and the attack has n components. With
    distinct channels B̄ = blkdiag(B, B): the first n components hit x, the
    last n hit z.
    """
    try:
        attack_channels = AttackChannels(attack_channels)
    except ValueError:
        raise DimensionError(f"attack channels must be 'shared' or 'distinct', got {attack_channels!r}") from None
    N = network.node_count
    if len(objectives) != N:
        raise DimensionError(f"{N} agents but {len(objectives)} objectives")
    if not alpha > 0:
        raise DimensionError(f"step size must be positive, got {alpha}")
    for label, node in (("attack", attack_node), ("monitor", monitor_node)):
        if not 1 <= node <= N:
            raise DimensionError(f"{label} node {node} outside 1..{N}")
    if attack_gain not in (0, 1):
        raise DimensionError(f"attack gain must be 0 or 1, got {attack_gain}")

    Q, c = stack_objectives(objectives)
    n = objectives[0].dimension
    if consensus is None:
        consensus = build_consensus_matrix(network, n=n, config=config)
    K = consensus.K
    if K.shape != (N * n, N * n):
        raise DimensionError(f"consensus matrix is {K.shape}, expected {(N * n, N * n)}")

    identity = np.eye(N * n)
    A = np.block([[identity - K - alpha * Q, -K], [K, identity]])
    selector = np.zeros((N, 1))
    selector[attack_node - 1, 0] = attack_gain
    B_single = np.kron(selector, np.eye(n))
    if attack_channels == AttackChannels.SHARED:
        B = np.vstack([B_single, B_single])
    else:
        B = scipy.linalg.block_diag(B_single, B_single)
    c_bar = np.concatenate([-alpha * c, np.zeros(N * n)])

    weights = monitor_weights(w, n)
    W = np.diag(np.concatenate([1.0 - weights, weights]))
    C_check = monitor_selector(N, n, monitor_node)

    system = AggregatedSystem(
        A=A,
        B=B,
        c=c_bar,
        C_p=build_performance_output(N, n),
        C_m=W @ C_check,
        C_check=C_check,
        W=W,
        alpha=float(alpha),
        attack_node=attack_node,
        monitor_node=monitor_node,
        w=weights,
        N=N,
        n=n,
        attack_channels=attack_channels,
    )
    logger.debug(
        "Aggregated system assembled: %d states, %s attack channels at node %d, monitor node %d, w=%s",
        system.states,
        attack_channels.value,
        attack_node,
        monitor_node,
        weights.tolist(),
    )
    return system


def global_optimum(objectives: Sequence[QuadraticObjective], least_squares: bool = False) -> np.ndarray:
    """x* solving (ΣQ_i)x* = −Σc_i."""
    Q_sum = sum(objective.Q for objective in objectives)
    c_sum = sum(objective.c for objective in objectives)
    eigenvalues = scipy.linalg.eigvalsh(Q_sum)
    scale = max(1.0, float(np.max(np.abs(eigenvalues))))
    if eigenvalues[0] <= 1e-12 * scale:
        if not least_squares:
            raise SingularObjectiveError(
                f"sum of Q_i is singular (min eigenvalue {eigenvalues[0]:.3e}); "
                "the optimum is not unique, use least-squares mode"
            )
        return np.linalg.lstsq(Q_sum, -c_sum, rcond=None)[0]

    x_star = np.linalg.solve(Q_sum, -c_sum)
    residual = float(np.max(np.abs(Q_sum @ x_star + c_sum))) if x_star.size else 0.0
    if residual > 1e-10 * max(1.0, float(np.max(np.abs(c_sum)))):
        x_star = scipy.linalg.lstsq(Q_sum, -c_sum)[0]
    return x_star


def equilibrium(system: AggregatedSystem) -> np.ndarray:
    """Minimum-norm fixed point of the unattacked closed loop."""
    identity = np.eye(system.states)
    x_eq, *_ = np.linalg.lstsq(identity - system.A, system.c, rcond=None)
    residual = float(np.max(np.abs((identity - system.A) @ x_eq - system.c)))
    if residual > 1e-8 * max(1.0, float(np.max(np.abs(system.c)))):
        raise SingularObjectiveError(
            f"the closed loop has no fixed point (residual {residual:.3e}); check that sum of Q_i is nonsingular"
        )
    return x_eq


def random_objectives(
    N: int,
    n: int,
    Q_range: Tuple[float, float],
    c_range: Tuple[float, float],
    seed: int,
) -> List[QuadraticObjective]:
    """Seeded Q_i ~ U[Q_range] (eigenvalues for n > 1) and c_i ~ U[c_range]^n."""
    rng = np.random.default_rng(seed)
    objectives = []
    for _ in range(N):
        spectrum = rng.uniform(Q_range[0], Q_range[1], size=n)
        if n == 1:
            Q = spectrum.reshape(1, 1)
        else:
            U = ortho_group.rvs(n, random_state=rng)
            Q = U.T @ np.diag(spectrum) @ U
        c = rng.uniform(c_range[0], c_range[1], size=n)
        objectives.append(QuadraticObjective(Q=0.5 * (Q + Q.T), c=c))
    return objectives
