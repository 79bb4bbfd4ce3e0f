import logging
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from config import Config
from errors import AttackSynthesisError, DimensionError, ZeroComputationError
from model import SystemTriple
from utils import spawn_generators

logger = logging.getLogger(__name__)

INFINITE_DEGREE = math.inf
# Generalized eigenvalues beyond this modulus are treated as zeros at infinity.
FINITE_ZERO_LIMIT = 1e8

Degree = Union[int, float]


class Classification(str, Enum):
    UNBOUNDED_VIA_ZERO = "UNBOUNDED_VIA_ZERO"
    UNBOUNDED_VIA_RELATIVE_DEGREE = "UNBOUNDED_VIA_RELATIVE_DEGREE"
    BOUNDED_CANDIDATE = "BOUNDED_CANDIDATE"


class AttackKind(str, Enum):
    ZDA = "ZDA"
    RELATIVE_DEGREE = "RELATIVE_DEGREE"
    CUSTOM = "CUSTOM"


@dataclass(frozen=True)
class InvariantZero:
    """A rank drop of [λI−A, B; C, 0] together with its null vector (x₀, g)."""

    value: complex
    state: np.ndarray
    input: np.ndarray
    residual: float
    marginal: bool = False
    decoupling: bool = False

    @property
    def modulus(self) -> float:
        return abs(self.value)

    def is_unstable(self, band: float = 0.0) -> bool:
        return self.modulus > 1.0 + band

    def as_dict(self) -> Dict[str, Any]:
        return {
            "real": float(np.real(self.value)),
            "imag": float(np.imag(self.value)),
            "modulus": self.modulus,
            "residual": self.residual,
            "marginal": self.marginal,
            "decoupling": self.decoupling,
        }


@dataclass(frozen=True)
class SecurityVerdict:
    classification: Classification
    delta_m: Degree
    delta_p: Degree
    zeros_m: Tuple[InvariantZero, ...]
    zeros_p: Tuple[InvariantZero, ...]
    witness: Any = None

    @property
    def degree_gap(self) -> Degree:
        return self.delta_m - self.delta_p

    @property
    def is_unbounded(self) -> bool:
        return self.classification != Classification.BOUNDED_CANDIDATE


@dataclass(frozen=True)
class AttackSignal:
    kind: AttackKind
    samples: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.samples.shape[0]


def relative_degree(triple: SystemTriple, j_max: Optional[int] = None, tol: Optional[float] = None) -> Degree:
    """δ = 1 + min{j : ‖CAʲB‖_max > tol}, or INFINITE_DEGREE if no j ≤ j_max qualifies."""
    tol = Config.default().rank_tol if tol is None else tol
    j_max = triple.states if j_max is None else j_max
    if j_max < 1:
        raise DimensionError(f"j_max must be at least 1, got {j_max}")

    reach = triple.B
    for j in range(j_max + 1):
        markov = triple.C @ reach
        if markov.size and np.max(np.abs(markov)) > tol:
            return j + 1
        reach = triple.A @ reach
    return INFINITE_DEGREE


def rosenbrock_pencil(triple: SystemTriple, value: complex) -> np.ndarray:
    nx = triple.states
    top = np.hstack([value * np.eye(nx) - triple.A, triple.B])
    bottom = np.hstack([triple.C, np.zeros((triple.outputs, triple.inputs))])
    return np.vstack([top, bottom]).astype(complex)


def _numerical_rank(matrix: np.ndarray, tol: float) -> int:
    singular_values = scipy.linalg.svdvals(matrix)
    if singular_values.size == 0 or singular_values[0] == 0:
        return 0
    return int(np.sum(singular_values > tol * singular_values[0]))


def normal_rank(triple: SystemTriple, rng: np.random.Generator, config: Config) -> int:
    """Rank of the pencil at random sample points; disagreement is an error."""
    ranks = []
    for _ in range(config.normal_rank_samples):
        point = rng.uniform(1.5, 3.0) * np.exp(2j * np.pi * rng.uniform())
        ranks.append(_numerical_rank(rosenbrock_pencil(triple, point), config.rank_tol))
    if len(set(ranks)) != 1:
        raise ZeroComputationError(
            f"normal rank estimates disagree across sample points {ranks}; adjust rank_tol (currently {config.rank_tol:g})"
        )
    return ranks[0]


def _square_down_eigenvalues(triple: SystemTriple, rng: np.random.Generator) -> np.ndarray:
    """Finite generalized eigenvalues of one randomly squared-down pencil."""
    A, B, C = triple.A, triple.B, triple.C
    m, p, nx = triple.inputs, triple.outputs, triple.states
    if p > m:
        C = rng.standard_normal((m, p)) @ C
    elif p < m:
        B = B @ rng.standard_normal((m, p))
    size = min(m, p)

    L = np.block([[A, B], [C, np.zeros((size, size))]])
    M = np.zeros_like(L)
    M[:nx, :nx] = np.eye(nx)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        alpha, beta = scipy.linalg.eigvals(L, M, homogeneous_eigvals=True)
    finite = np.abs(beta) > 1e-12 * np.maximum(np.abs(alpha), 1.0)
    values = alpha[finite] / beta[finite]
    return values[np.isfinite(values) & (np.abs(values) < FINITE_ZERO_LIMIT)]


def _intersect(base: np.ndarray, others: Sequence[np.ndarray], tol: float) -> List[complex]:
    """Values of ``base`` matched (without reuse) in every other draw."""
    kept = []
    pools = [list(values) for values in others]
    for value in base:
        matched = True
        picks = []
        for pool in pools:
            distances = [abs(value - candidate) for candidate in pool]
            if not distances or min(distances) > tol * max(1.0, abs(value)):
                matched = False
                break
            picks.append(int(np.argmin(distances)))
        if matched:
            for pool, pick in zip(pools, picks):
                pool.pop(pick)
            kept.append(complex(value))
    return kept


def _certificate(triple: SystemTriple, value: complex) -> Tuple[np.ndarray, np.ndarray, float]:
    pencil = rosenbrock_pencil(triple, value)
    _, singular_values, vh = scipy.linalg.svd(pencil)
    vector = vh[-1].conj()
    # Fix the phase so real zeros give real directions.
    anchor = vector[np.argmax(np.abs(vector))]
    vector = vector * (abs(anchor) / anchor)
    nx = triple.states
    x0, g = vector[:nx], vector[nx:]
    residual = float(np.linalg.norm(pencil @ vector) / (np.linalg.norm(x0) + np.linalg.norm(g)))
    return x0, g, residual


def invariant_zeros(
    triple: SystemTriple,
    seed: int = 0,
    draws: Optional[int] = None,
    config: Optional[Config] = None,
) -> List[InvariantZero]:
    """Invariant zeros by randomized square-down, intersected across draws.

    Each surviving value carries the smallest singular vector of the full
    pencil as its certificate. Values whose certificate residual exceeds the
    pencil tolerance are dropped.
    """
    config = config or Config.default()
    draws = config.square_down_draws if draws is None else draws
    if draws < 3:
        raise ZeroComputationError(f"at least 3 square-down draws are required, got {draws}")
    if triple.states == 0:
        return []

    rank_rng, *draw_rngs = spawn_generators(seed, draws + 1)
    rank = normal_rank(triple, rank_rng, config)
    full = triple.states + min(triple.inputs, triple.outputs)
    if rank < full:
        raise ZeroComputationError(
            f"pencil normal rank {rank} is below {full}; the transfer matrix is rank deficient "
            "and every point is a rank drop"
        )

    if triple.inputs == triple.outputs:
        candidates = list(_square_down_eigenvalues(triple, draw_rngs[0]))
    else:
        spectra = [_square_down_eigenvalues(triple, rng) for rng in draw_rngs]
        candidates = _intersect(spectra[0], spectra[1:], config.zero_agreement_tol)

    zeros = []
    for value in candidates:
        if abs(value.imag) <= config.zero_agreement_tol * max(1.0, abs(value)):
            value = complex(value.real, 0.0)
        x0, g, residual = _certificate(triple, value)
        if residual > config.pencil_residual_tol:
            logger.debug("Discarding candidate zero %s (certificate residual %.3e)", value, residual)
            continue
        zeros.append(
            InvariantZero(
                value=value,
                state=x0,
                input=g,
                residual=residual,
                marginal=abs(abs(value) - 1.0) < config.marginal_band,
                decoupling=bool(np.linalg.norm(g) <= 1e-8),
            )
        )
    zeros.sort(key=lambda zero: (-zero.modulus, zero.value.real, zero.value.imag))
    logger.debug("Found %d invariant zeros (normal rank %d)", len(zeros), rank)
    return zeros


def unstable_zeros(zeros: Sequence[InvariantZero], config: Optional[Config] = None) -> List[InvariantZero]:
    config = config or Config.default()
    return [zero for zero in zeros if not zero.marginal and zero.is_unstable(config.marginal_band)]


def _shared(zero: InvariantZero, others: Sequence[InvariantZero], tol: float) -> bool:
    return any(abs(zero.value - other.value) <= tol * max(1.0, zero.modulus) for other in others)


def classify(
    monitor: SystemTriple,
    performance: SystemTriple,
    seed: int = 0,
    config: Optional[Config] = None,
) -> SecurityVerdict:
    """Decide whether a stealthy attacker can drive the performance output without bound."""
    config = config or Config.default()
    if monitor.A.shape != performance.A.shape or not (
        np.array_equal(monitor.A, performance.A) and np.array_equal(monitor.B, performance.B)
    ):
        raise DimensionError("monitor and performance systems must share (A, B)")

    zeros_m = invariant_zeros(monitor, seed=seed, config=config)
    zeros_p = invariant_zeros(performance, seed=seed + 1, config=config)
    delta_m = relative_degree(monitor, tol=config.rank_tol)
    delta_p = relative_degree(performance, tol=config.rank_tol)

    exposed = [
        zero
        for zero in unstable_zeros(zeros_m, config)
        if not _shared(zero, zeros_p, config.zero_agreement_tol)
    ]
    if exposed:
        exposed.sort(key=lambda zero: (zero.decoupling, -zero.modulus))
        classification, witness = Classification.UNBOUNDED_VIA_ZERO, exposed[0]
    elif delta_m > delta_p:
        classification, witness = Classification.UNBOUNDED_VIA_RELATIVE_DEGREE, {"delta_m": delta_m, "delta_p": delta_p}
    else:
        classification, witness = Classification.BOUNDED_CANDIDATE, None

    logger.info("Security verdict: %s (delta_m=%s, delta_p=%s)", classification.value, delta_m, delta_p)
    return SecurityVerdict(
        classification=classification,
        delta_m=delta_m,
        delta_p=delta_p,
        zeros_m=tuple(zeros_m),
        zeros_p=tuple(zeros_p),
        witness=witness,
    )


def synthesize_zda(zero: InvariantZero, scale: float = 1.0, horizon: int = 100) -> Tuple[AttackSignal, np.ndarray]:
    """a[k] = scale·Re(λᵏg) for k = 0..L with the initial state that hides it.

    Under the pencil [λI−A, B; C, 0] the null vector satisfies Ax₀ − Bg = λx₀,
    so the matching state trajectory starts from −scale·Re(x₀).
    """
    if scale < 0:
        raise AttackSynthesisError(f"scale must be nonnegative, got {scale}")
    if horizon < 0:
        raise AttackSynthesisError(f"horizon must be nonnegative, got {horizon}")
    g = np.asarray(zero.input, dtype=complex)
    if np.linalg.norm(g) <= 1e-12:
        raise AttackSynthesisError(
            f"zero {zero.value:.6g} has no input direction; a pure state-direction zero cannot be excited"
        )
    if not zero.is_unstable():
        logger.warning("Zero %s has modulus %.6g <= 1; the attack will decay", zero.value, zero.modulus)

    powers = np.power(complex(zero.value), np.arange(horizon + 1))
    samples = scale * np.real(np.outer(powers, g))
    initial_state = -scale * np.real(np.asarray(zero.state, dtype=complex))
    signal = AttackSignal(
        kind=AttackKind.ZDA,
        samples=samples,
        metadata={"lambda": zero.value, "g": g, "x0": zero.state, "scale": scale},
    )
    return signal, initial_state


def synthesize_rd_attack(horizon: int, delta_m: Degree, beta: float, n: int = 1) -> AttackSignal:
    """Zero until L−δ_m, then β·1 for the last δ_m samples."""
    if not math.isfinite(delta_m):
        raise AttackSynthesisError("the monitor has infinite relative degree; any attack is invisible")
    delta_m = int(delta_m)
    if horizon <= delta_m:
        raise AttackSynthesisError(f"horizon {horizon} must exceed the relative degree {delta_m}")
    if beta == 0:
        raise AttackSynthesisError("beta must be nonzero")
    samples = np.zeros((horizon + 1, n))
    samples[horizon - delta_m + 1:] = beta
    return AttackSignal(
        kind=AttackKind.RELATIVE_DEGREE,
        samples=samples,
        metadata={"beta": beta, "delta_m": delta_m},
    )


def custom_attack(samples: Sequence, n: int = 1) -> AttackSignal:
    array = np.asarray(samples, dtype=float)
    if array.ndim == 1:
        array = array.reshape(-1, n)
    if array.shape[1] != n:
        raise AttackSynthesisError(f"custom attack has {array.shape[1]} components, expected {n}")
    return AttackSignal(kind=AttackKind.CUSTOM, samples=array)


def verdict_report(verdict: SecurityVerdict) -> Dict[str, Any]:
    def degree(value: Degree) -> Union[int, str]:
        return "inf" if not math.isfinite(value) else int(value)

    witness = verdict.witness
    if isinstance(witness, InvariantZero):
        witness = {"zero": witness.as_dict()}
    elif isinstance(witness, dict):
        witness = {key: degree(value) for key, value in witness.items()}

    return {
        "classification": verdict.classification.value,
        "delta_m": degree(verdict.delta_m),
        "delta_p": degree(verdict.delta_p),
        "zeros_m": [zero.as_dict() for zero in verdict.zeros_m],
        "zeros_p": [zero.as_dict() for zero in verdict.zeros_p],
        "witness": witness,
    }
