import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from config import Config
from errors import AugmentationError, DimensionError, OracleSizeError, SolverError
from model import AggregatedSystem, AttackChannels, QuadraticObjective, SystemTriple, assemble_system
from network import Network
from sdp import CongruenceTerm, LinearMatrixInequality, SdpProblem, SdpSolution
from sdp import solve as solve_sdp
from utils import spawn_generators
from zeros import (
    Classification,
    InvariantZero,
    SecurityVerdict,
    classify,
    relative_degree,
    unstable_zeros,
    verdict_report,
)

logger = logging.getLogger(__name__)

UNBOUNDED = math.inf
OUTSIDE_CYCLO_HYPOTHESIS = "outside cyclo-dissipative hypothesis"
REDUCED_REALIZATION = "minimal realization"


class MetricMode(str, Enum):
    PSD = "psd"
    CYCLO = "cyclo"


@dataclass(frozen=True)
class AugmentedSystem:
    """Closed loop whose performance output is delayed by ``delay_count`` steps."""

    A: np.ndarray
    B: np.ndarray
    C_p: np.ndarray
    C_m: np.ndarray
    c: np.ndarray
    delay_count: int = 0
    base: Optional[AggregatedSystem] = None

    @classmethod
    def from_matrices(cls, A, B, C_p, C_m, c=None) -> "AugmentedSystem":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        performance = SystemTriple(A, B, C_p)
        monitor = SystemTriple(A, B, C_m)
        constant = np.zeros(A.shape[0]) if c is None else np.asarray(c, dtype=float)
        return cls(A=performance.A, B=performance.B, C_p=performance.C, C_m=monitor.C, c=constant)

    @property
    def states(self) -> int:
        return self.A.shape[0]

    def monitor_triple(self) -> SystemTriple:
        return SystemTriple(self.A, self.B, self.C_m)

    def performance_triple(self) -> SystemTriple:
        return SystemTriple(self.A, self.B, self.C_p)


@dataclass(frozen=True)
class MetricResult:
    value: float
    mode: MetricMode
    epsilon: float
    gamma: float
    P: Optional[np.ndarray]
    matrices: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    status: str = "optimal"
    residual: float = 0.0
    verdict: Optional[SecurityVerdict] = None
    oracle: Dict[int, float] = field(default_factory=dict)
    tags: Tuple[str, ...] = ()

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.value)

    def with_oracle(self, oracle: Dict[int, float]) -> "MetricResult":
        return replace(self, oracle=dict(oracle))

    def with_verdict(self, verdict: SecurityVerdict, tags: Sequence[str] = ()) -> "MetricResult":
        return replace(self, verdict=verdict, tags=tuple(self.tags) + tuple(tags))

    def as_dict(self) -> Dict[str, Any]:
        def number(value: float) -> Any:
            return "UNBOUNDED" if math.isinf(value) else float(value)

        report: Dict[str, Any] = {
            "value": number(self.value),
            "mode": self.mode.value,
            "epsilon": self.epsilon,
            "gamma_star": number(self.gamma),
            "status": self.status,
            "residual": self.residual,
            "tags": list(self.tags),
            "oracle": [{"L": L, "gamma_L": number(value)} for L, value in sorted(self.oracle.items())],
            "verdict": verdict_report(self.verdict) if self.verdict is not None else None,
        }
        if self.unbounded and self.verdict is not None:
            report["reason"] = report["verdict"]["witness"]
        return report


def _augment(A, B, C_p, C_m, c, delay_count: int) -> Tuple[np.ndarray, ...]:
    if delay_count == 0:
        return A, B, C_p, C_m, c
    nx, q = A.shape[0], C_p.shape[0]
    size = nx + delay_count * q
    A_aug = np.zeros((size, size))
    A_aug[:nx, :nx] = A
    A_aug[nx:nx + q, :nx] = C_p
    for i in range(1, delay_count):
        row = nx + i * q
        A_aug[row:row + q, row - q:row] = np.eye(q)
    B_aug = np.vstack([B, np.zeros((delay_count * q, B.shape[1]))])
    C_p_aug = np.zeros((q, size))
    C_p_aug[:, size - q:] = np.eye(q)
    C_m_aug = np.hstack([C_m, np.zeros((C_m.shape[0], delay_count * q))])
    c_aug = np.concatenate([c, np.zeros(delay_count * q)])
    return A_aug, B_aug, C_p_aug, C_m_aug, c_aug


def augment_delays(system, delta_m: float, delta_p: float, config: Optional[Config] = None) -> AugmentedSystem:
    """Delay the performance output by δ_m − δ_p samples so both channels share a relative degree."""
    config = config or Config.default()
    monitor = SystemTriple(system.A, system.B, system.C_m)
    performance = SystemTriple(system.A, system.B, system.C_p)
    actual_m = relative_degree(monitor, tol=config.rank_tol)
    actual_p = relative_degree(performance, tol=config.rank_tol)
    if (actual_m, actual_p) != (delta_m, delta_p):
        raise AugmentationError(
            f"relative degrees ({delta_m}, {delta_p}) do not match the system ({actual_m}, {actual_p})"
        )
    if math.isinf(delta_m) or math.isinf(delta_p):
        raise AugmentationError("a channel has infinite relative degree; delays cannot align it")

    delay_count = int(max(0, delta_m - delta_p))
    base = system if isinstance(system, AggregatedSystem) else getattr(system, "base", None)
    A, B, C_p, C_m, c = _augment(system.A, system.B, system.C_p, system.C_m, system.c, delay_count)
    augmented = AugmentedSystem(A=A, B=B, C_p=C_p, C_m=C_m, c=c, delay_count=delay_count, base=base)

    if delay_count:
        check_m = relative_degree(augmented.monitor_triple(), tol=config.rank_tol)
        check_p = relative_degree(augmented.performance_triple(), tol=config.rank_tol)
        if check_m != check_p:
            raise AugmentationError(f"augmented relative degrees differ ({check_m} vs {check_p})")
        logger.info("Performance output delayed by %d step(s); augmented state dimension %d", delay_count, augmented.states)
    return augmented


def _krylov_basis(A: np.ndarray, B: np.ndarray, tol: float) -> np.ndarray:
    """Orthonormal basis of span{B, AB, A²B, ...} built block by block."""
    size = A.shape[0]
    scale = max(1.0, float(np.linalg.norm(B, 2)))
    basis = np.zeros((size, 0))
    block = B
    for _ in range(size):
        if basis.shape[1]:
            block = block - basis @ (basis.T @ block)
            block = block - basis @ (basis.T @ block)
        if block.size == 0:
            break
        u, s, _ = np.linalg.svd(block, full_matrices=False)
        keep = s > tol * scale
        if not np.any(keep):
            break
        new = u[:, keep]
        basis = np.hstack([basis, new])
        if basis.shape[1] >= size:
            break
        block = A @ new
    return basis


def minimal_realization(A, B, C_p, C_m, tol: float = 1e-9) -> Tuple[np.ndarray, ...]:
    """Restrict to the reachable subspace, then to what [C_p; C_m] can observe.

    Returns (A, B, C_p, C_m, T) where T has orthonormal columns and the
    reduced state is Tᵀx̄.
    """
    reach = _krylov_basis(A, B, tol)
    A_r = reach.T @ A @ reach
    C = np.vstack([C_p, C_m]) @ reach
    observe = _krylov_basis(A_r.T, C.T, tol)
    T = reach @ observe
    return T.T @ A @ T, T.T @ B, C_p @ T, C_m @ T, T


def _dissipation_problem(A, B, C_p, C_m, mode: MetricMode, config: Config) -> SdpProblem:
    nx, m = A.shape[0], B.shape[1]
    AB = np.hstack([A, B])
    E = np.hstack([np.eye(nx), np.zeros((nx, m))])

    performance = np.zeros((nx + m, nx + m))
    performance[:nx, :nx] = C_p.T @ C_p
    monitor = np.zeros((nx + m, nx + m))
    monitor[:nx, :nx] = C_m.T @ C_m

    problem = SdpProblem()
    if mode == MetricMode.PSD:
        problem.add_matrix("P", nx, psd=True)
    else:
        problem.add_matrix("P", nx, bound=config.cyclo_p_bound)
    problem.add_scalar("gamma", lower=0.0)
    problem.objective = {"gamma": 1.0}
    problem.add_lmi(
        LinearMatrixInequality(
            constant=performance,
            scalar_terms=[("gamma", -monitor)],
            congruence_terms=[
                CongruenceTerm("P", AB.T, AB, 1.0),
                CongruenceTerm("P", E.T, E, -1.0),
            ],
            sense="<=",
            label="dissipation",
        )
    )
    return problem


def _solve_dissipation(A, B, C_p, C_m, mode: MetricMode, config: Config) -> Tuple[Optional[SdpSolution], str]:
    try:
        return solve_sdp(_dissipation_problem(A, B, C_p, C_m, mode, config), config), ""
    except SolverError as exc:
        return None, exc.status or str(exc)


def security_sdp(
    aug: AugmentedSystem,
    epsilon: float,
    mode: MetricMode = MetricMode.PSD,
    config: Optional[Config] = None,
    verdict: Optional[SecurityVerdict] = None,
) -> MetricResult:
    """Minimise εγ subject to the dissipation LMI; UNBOUNDED when no γ works.

    A failed or infeasible attempt is retried once on the minimal realization.
    """
    config = config or Config.default()
    if epsilon < 0:
        raise DimensionError(f"epsilon must be nonnegative, got {epsilon}")
    mode = MetricMode(mode)

    matrices = (aug.A, aug.B, aug.C_p, aug.C_m)
    tags: List[str] = []
    solution, failure = _solve_dissipation(*matrices, mode, config)
    if solution is None or not solution.feasible:
        A_r, B_r, C_p_r, C_m_r, T = minimal_realization(*matrices, tol=config.rank_tol)
        logger.info(
            "Dissipation SDP %s on %d states; retrying on a %d-state minimal realization",
            failure or "infeasible",
            aug.states,
            T.shape[1],
        )
        matrices = (A_r, B_r, C_p_r, C_m_r)
        tags.append(REDUCED_REALIZATION)
        if T.shape[1] == 0:
            solution = SdpSolution(status="optimal", objective=0.0, values={"P": np.zeros((0, 0)), "gamma": np.array(0.0)}, residual=0.0)
        else:
            solution, failure = _solve_dissipation(*matrices, mode, config)
            if solution is None:
                raise SolverError(f"dissipation SDP failed in {mode.value} mode ({failure})", status=failure)

    if not solution.feasible:
        logger.info("Dissipation SDP infeasible in %s mode: metric is unbounded", mode.value)
        return MetricResult(
            value=UNBOUNDED,
            mode=mode,
            epsilon=float(epsilon),
            gamma=UNBOUNDED,
            P=None,
            matrices=matrices,
            status=solution.status,
            residual=math.inf,
            verdict=verdict,
            tags=tuple(tags),
        )

    gamma = max(0.0, float(solution.values["gamma"]))
    logger.info("SDP solved in %s mode: gamma=%.6g, value=%.6g", mode.value, gamma, epsilon * gamma)
    return MetricResult(
        value=float(epsilon) * gamma,
        mode=mode,
        epsilon=float(epsilon),
        gamma=gamma,
        P=solution.values["P"],
        matrices=matrices,
        status=solution.status,
        residual=solution.residual,
        verdict=verdict,
        tags=tuple(tags),
    )


def markov_parameters(A: np.ndarray, B: np.ndarray, C: np.ndarray, horizon: int) -> List[np.ndarray]:
    """[C B, C A B, ..., C A^(L−1) B]."""
    parameters = []
    reach = B
    for _ in range(horizon):
        parameters.append(C @ reach)
        reach = A @ reach
    return parameters


def lifted_operator(A: np.ndarray, B: np.ndarray, C: np.ndarray, horizon: int) -> np.ndarray:
    """Block lower-triangular Toeplitz map from a[0..L−1] to y[1..L] (zero initial state)."""
    parameters = markov_parameters(A, B, C, horizon)
    p, m = C.shape[0], B.shape[1]
    lifted = np.zeros((horizon * p, horizon * m))
    for k in range(horizon):
        for j in range(k + 1):
            lifted[k * p:(k + 1) * p, j * m:(j + 1) * m] = parameters[k - j]
    return lifted


def finite_horizon_oracle(aug: AugmentedSystem, epsilon: float, horizon: int, config: Optional[Config] = None) -> float:
    """Worst ε-constrained performance energy over horizons of length L, by dense SVD."""
    config = config or Config.default()
    if horizon < 1:
        raise DimensionError(f"oracle horizon must be at least 1, got {horizon}")
    columns = horizon * aug.B.shape[1]
    if columns > config.oracle_max_columns:
        raise OracleSizeError(
            f"lifted operator would have {columns} columns (limit {config.oracle_max_columns}); reduce L"
        )

    O_p = lifted_operator(aug.A, aug.B, aug.C_p, horizon)
    O_m = lifted_operator(aug.A, aug.B, aug.C_m, horizon)
    _, s, vt = np.linalg.svd(O_m, full_matrices=True)
    rank = int(np.sum(s > config.rank_tol * s[0])) if s.size and s[0] > 0 else 0

    null_basis = vt[rank:].T
    if null_basis.shape[1]:
        leak = np.linalg.norm(O_p @ null_basis, 2)
        if leak > 1e-6 * max(1.0, np.linalg.norm(O_p, 2)):
            return UNBOUNDED
    if rank == 0:
        return 0.0

    gain = O_p @ vt[:rank].T / s[:rank]
    return float(epsilon) * float(scipy.linalg.svdvals(gain)[0]) ** 2


def _cyclo_hypothesis_holds(verdict: SecurityVerdict, config: Config) -> bool:
    def transmission(zeros: Sequence[InvariantZero]) -> List[InvariantZero]:
        return [zero for zero in zeros if not zero.decoupling]

    zeros_m, zeros_p = transmission(verdict.zeros_m), transmission(verdict.zeros_p)
    if any(zero.marginal for zero in zeros_m + zeros_p):
        return False
    unstable_m = unstable_zeros(zeros_m, config)
    unstable_p = unstable_zeros(zeros_p, config)
    if len(unstable_m) != 1 or len(unstable_p) != 1:
        return False
    return abs(unstable_m[0].modulus - unstable_p[0].modulus) > config.zero_agreement_tol


def auto_mode(verdicts: Iterable[SecurityVerdict]) -> MetricMode:
    """CYCLO as soon as one system is exposed through an invariant zero, PSD otherwise."""
    exposed = any(verdict.classification == Classification.UNBOUNDED_VIA_ZERO for verdict in verdicts)
    return MetricMode.CYCLO if exposed else MetricMode.PSD


def metric_for_system(
    aug: AugmentedSystem,
    epsilon: float,
    mode: Optional[MetricMode] = None,
    oracle_horizons: Sequence[int] = (),
    seed: int = 0,
    config: Optional[Config] = None,
) -> MetricResult:
    """Classify, align relative degrees, choose the SDP mode and solve."""
    config = config or Config.default()
    verdict = classify(aug.monitor_triple(), aug.performance_triple(), seed=seed, config=config)

    target = aug
    if not math.isinf(verdict.delta_m) and verdict.delta_m > verdict.delta_p:
        target = augment_delays(aug, verdict.delta_m, verdict.delta_p, config)

    tags: List[str] = []
    if mode is None:
        mode = auto_mode([verdict])
    mode = MetricMode(mode)
    if mode == MetricMode.CYCLO and not _cyclo_hypothesis_holds(verdict, config):
        tags.append(OUTSIDE_CYCLO_HYPOTHESIS)

    result = security_sdp(target, epsilon, mode, config).with_verdict(verdict, tags)
    if oracle_horizons:
        result = result.with_oracle({int(L): finite_horizon_oracle(target, epsilon, int(L), config) for L in oracle_horizons})
    return result


def metric_for_scenario(
    network: Network,
    objectives: Sequence[QuadraticObjective],
    alpha: float,
    attack_node: int,
    monitor_node: int,
    w,
    epsilon: float,
    mode: Optional[MetricMode] = None,
    oracle_horizons: Sequence[int] = (),
    seed: int = 0,
    config: Optional[Config] = None,
    attack_channels: AttackChannels = AttackChannels.SHARED,
) -> MetricResult:
    system = assemble_system(
        network, objectives, alpha, attack_node, monitor_node, w, config=config, attack_channels=attack_channels
    )
    aug = AugmentedSystem(A=system.A, B=system.B, C_p=system.C_p, C_m=system.C_m, c=system.c, base=system)
    return metric_for_system(aug, epsilon, mode, oracle_horizons, seed, config)


def scenario_verdict(
    network: Network,
    objectives: Sequence[QuadraticObjective],
    alpha: float,
    attack_node: int,
    monitor_node: int,
    w,
    seed: int = 0,
    config: Optional[Config] = None,
    attack_channels: AttackChannels = AttackChannels.SHARED,
) -> SecurityVerdict:
    """Zero and relative-degree verdict for one (attacker, monitor) placement, without any SDP."""
    system = assemble_system(
        network, objectives, alpha, attack_node, monitor_node, w, config=config, attack_channels=attack_channels
    )
    return classify(system.monitor_triple(), system.performance_triple(), seed=seed, config=config)


@dataclass(frozen=True)
class ReplayReport:
    trajectories: int
    checked: int
    max_violation: float
    passed: bool


def _steering_attack(A: np.ndarray, B: np.ndarray, x: np.ndarray, steps: int) -> np.ndarray:
    """Minimum-norm a[0..s−1] driving x to the origin in s steps."""
    m = B.shape[1]
    blocks = []
    power = np.eye(A.shape[0])
    for _ in range(steps):
        blocks.append(power @ B)
        power = A @ power
    reach = np.hstack(blocks[::-1])
    inputs, *_ = np.linalg.lstsq(reach, -power @ x, rcond=None)
    return inputs.reshape(steps, m)


def replay_certificate(
    result: MetricResult,
    trajectories: int = 100,
    horizon: int = 50,
    seed: int = 0,
    loops: Optional[bool] = None,
    tol: float = 1e-6,
) -> ReplayReport:
    """Check S(x[k+1]) − S(x[k]) ≤ γ‖y_m[k]‖² − ‖y_p[k]‖² along random attacked runs.

    Violations are measured relative to the largest term seen on the run. With
    ``loops`` (default for CYCLO) each run starts at the origin and is steered
    back to it, and the summed supply over the loop must be nonnegative too.
    """
    if result.unbounded or result.P is None:
        raise DimensionError("an unbounded metric has no certificate to replay")
    A, B, C_p, C_m = result.matrices
    P, gamma = result.P, result.gamma
    loops = (result.mode == MetricMode.CYCLO) if loops is None else loops
    nx, m = A.shape[0], B.shape[1]

    worst = 0.0
    checked = 0
    for rng in spawn_generators(seed, trajectories):
        if loops:
            x = np.zeros(nx)
            drive = rng.standard_normal((horizon, m))
            states = [x]
            for a in drive:
                x = A @ x + B @ a
                states.append(x)
            steer = _steering_attack(A, B, x, max(nx, 1))
            attack = np.vstack([drive, steer])
            for a in steer:
                x = A @ x + B @ a
                states.append(x)
        else:
            x = rng.standard_normal(nx)
            x /= max(np.linalg.norm(x), 1e-300)
            attack = rng.standard_normal((horizon, m))
            states = [x]
            for a in attack:
                x = A @ x + B @ a
                states.append(x)

        states = np.asarray(states)
        storage = np.einsum("ki,ij,kj->k", states, P, states)
        supply = gamma * np.sum((states[:-1] @ C_m.T) ** 2, axis=1) - np.sum((states[:-1] @ C_p.T) ** 2, axis=1)
        terms = np.abs(np.concatenate([storage, gamma * np.sum((states @ C_m.T) ** 2, axis=1), np.sum((states @ C_p.T) ** 2, axis=1)]))
        scale = max(1.0, float(np.max(terms))) if terms.size else 1.0

        violations = (storage[1:] - storage[:-1] - supply) / scale
        worst = max(worst, float(np.max(violations)) if violations.size else 0.0)
        if loops:
            worst = max(worst, float(-np.sum(supply)) / scale)
        checked += len(attack)

    report = ReplayReport(trajectories=trajectories, checked=checked, max_violation=worst, passed=worst <= tol)
    logger.debug("Certificate replay: %d steps, max normalized violation %.3e", checked, worst)
    return report
