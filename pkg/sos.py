"""Polynomial objectives and the sum-of-squares bound on the security metric.

Desk scale only: one coordinate per agent, at most four agents and quartic
objectives.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy

from config import Config
from errors import DimensionError, SosError
from model import build_performance_output, monitor_selector, monitor_weights
from network import Network, build_consensus_matrix
from sdp import EqualityBlock, LinearMatrixInequality, CongruenceTerm, SdpProblem, equality_residual, vec_selector
from sdp import solve as solve_sdp
from utils import spawn_generators

logger = logging.getLogger(__name__)

MAX_AGENTS = 4
MAX_OBJECTIVE_DEGREE = 4
MAX_SOS_DEGREE = 12
CHOP = 1e-14

Exponent = Tuple[int, ...]


@dataclass(frozen=True)
class Polynomial:
    """Sparse polynomial: exponent tuple -> coefficient over named variables."""

    variables: Tuple[str, ...]
    terms: Dict[Exponent, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        canonical = {}
        for exponent, coefficient in sorted(self.terms.items()):
            exponent = tuple(int(e) for e in exponent)
            if len(exponent) != len(self.variables):
                raise DimensionError(f"exponent {exponent} does not match variables {self.variables}")
            if coefficient != 0:
                canonical[exponent] = float(coefficient)
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "terms", canonical)

    @classmethod
    def univariate(cls, coefficients: Sequence[float], name: str = "x") -> "Polynomial":
        """Σ coefficients[k]·x^k."""
        return cls((name,), {(k,): c for k, c in enumerate(coefficients)})

    @classmethod
    def from_sympy(cls, expression, symbols: Sequence[sympy.Symbol]) -> "Polynomial":
        poly = sympy.Poly(sympy.expand(expression), *symbols)
        return cls(tuple(str(s) for s in symbols), {monom: float(coeff) for monom, coeff in poly.terms()})

    @property
    def symbols(self) -> Tuple[sympy.Symbol, ...]:
        return tuple(sympy.Symbol(name) for name in self.variables)

    @property
    def degree(self) -> int:
        return max((sum(exponent) for exponent in self.terms), default=0)

    def to_sympy(self):
        symbols = self.symbols
        return sum(
            (coefficient * sympy.Mul(*[s ** e for s, e in zip(symbols, exponent)]) for exponent, coefficient in self.terms.items()),
            sympy.Integer(0),
        )

    def derivative(self, variable: str) -> "Polynomial":
        index = self.variables.index(variable)
        terms = {}
        for exponent, coefficient in self.terms.items():
            if exponent[index]:
                lowered = list(exponent)
                lowered[index] -= 1
                terms[tuple(lowered)] = terms.get(tuple(lowered), 0.0) + coefficient * exponent[index]
        return Polynomial(self.variables, terms)

    def __add__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial.from_sympy(self.to_sympy() + other.to_sympy(), self.symbols)

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        return Polynomial.from_sympy(self.to_sympy() * other.to_sympy(), self.symbols)

    def __call__(self, point: Sequence[float]) -> float:
        point = np.asarray(point, dtype=float)
        return float(sum(c * np.prod(point ** np.asarray(e)) for e, c in self.terms.items()))


def monomials(count: int, low: int, high: int) -> List[Exponent]:
    """Exponent tuples of total degree low..high in graded order."""
    result = []
    for degree in range(low, high + 1):
        for combo in itertools.combinations_with_replacement(range(count), degree):
            exponent = [0] * count
            for index in combo:
                exponent[index] += 1
            result.append(tuple(exponent))
    return sorted(set(result), key=lambda e: (sum(e), tuple(-x for x in e)))


def _add(a: Exponent, b: Exponent) -> Exponent:
    return tuple(x + y for x, y in zip(a, b))


@dataclass(frozen=True)
class PolySystem:
    """Consensus-optimization loop with polynomial gradients: x̄[k+1] = Ā·Z(x̄[k]) + B̄a[k]."""

    objectives: Tuple[Polynomial, ...]
    K: np.ndarray
    alpha: float
    attack_node: int
    monitor_node: int
    w: float
    update: Tuple[Polynomial, ...]
    basis: Tuple[Exponent, ...]
    A: np.ndarray
    B: np.ndarray
    C_p: np.ndarray
    C_m: np.ndarray
    degree: int
    equilibrium: np.ndarray

    @property
    def N(self) -> int:
        return len(self.objectives)

    @property
    def state_names(self) -> Tuple[str, ...]:
        return tuple(f"x{i}" for i in range(1, self.N + 1)) + tuple(f"z{i}" for i in range(1, self.N + 1))

    @cached_property
    def _step(self):
        symbols = [sympy.Symbol(name) for name in self.state_names] + [sympy.Symbol("a")]
        return sympy.lambdify(symbols, [poly.to_sympy() for poly in self.update], "numpy")

    def step(self, state: np.ndarray, attack: float = 0.0) -> np.ndarray:
        return np.asarray(self._step(*np.asarray(state, dtype=float), float(attack)), dtype=float)


def polynomial_objective(coefficients: Sequence[float]) -> Polynomial:
    return Polynomial.univariate(coefficients)


def _consensus_optimum(objectives: Sequence[Polynomial]) -> float:
    total = [0.0] * (MAX_OBJECTIVE_DEGREE + 1)
    for objective in objectives:
        for (power,), coefficient in objective.terms.items():
            total[power] += coefficient
    gradient = [k * total[k] for k in range(len(total) - 1, 0, -1)]
    while gradient and gradient[0] == 0:
        gradient.pop(0)
    if len(gradient) < 2:
        raise SosError("the summed objective has a constant gradient; no isolated optimum")
    roots = [r.real for r in np.roots(gradient) if abs(r.imag) <= 1e-9 * max(1.0, abs(r))]
    if not roots:
        raise SosError("the summed gradient has no real root")
    return min(roots, key=lambda root: sum(objective([root]) for objective in objectives))


def build_poly_system(
    objectives: Sequence[Polynomial],
    network: Network,
    alpha: float,
    attack_node: int,
    monitor_node: int,
    w: float = 0.5,
    config: Optional[Config] = None,
) -> PolySystem:
    N = network.node_count
    if len(objectives) != N:
        raise DimensionError(f"{N} agents but {len(objectives)} objectives")
    if N > MAX_AGENTS:
        raise SosError(f"polynomial analysis supports at most {MAX_AGENTS} agents, got {N}")
    for index, objective in enumerate(objectives, start=1):
        if len(objective.variables) != 1:
            raise SosError(f"objective {index} has {len(objective.variables)} variables; one coordinate per agent is supported")
        if objective.degree > MAX_OBJECTIVE_DEGREE:
            raise SosError(
                f"objective {index} has degree {objective.degree}; its gradient composes to degree "
                f"{objective.degree - 1} per step, above the cap {MAX_OBJECTIVE_DEGREE - 1}"
            )
    for node in (attack_node, monitor_node):
        if not 1 <= node <= N:
            raise DimensionError(f"node {node} outside 1..{N}")

    K = build_consensus_matrix(network, n=1, config=config).K
    xs = sympy.symbols(f"x1:{N + 1}")
    zs = sympy.symbols(f"z1:{N + 1}")
    a = sympy.Symbol("a")
    symbols = list(xs) + list(zs) + [a]

    update = []
    for i in range(N):
        gradient = objectives[i].derivative(objectives[i].variables[0]).to_sympy().subs(
            sympy.Symbol(objectives[i].variables[0]), xs[i]
        )
        hit = a if i + 1 == attack_node else 0
        coupling_x = sum(float(K[i, j]) * xs[j] for j in range(N))
        coupling_z = sum(float(K[i, j]) * zs[j] for j in range(N))
        update.append((xs[i] - coupling_x - coupling_z - alpha * gradient + hit, zs[i] + coupling_x + hit))
    expressions = [x_next for x_next, _ in update] + [z_next for _, z_next in update]
    polynomials = tuple(Polynomial.from_sympy(expr, symbols) for expr in expressions)

    degree = max(1, max(objective.degree - 1 for objective in objectives))
    basis = tuple(monomials(2 * N, 0, degree))
    A = np.zeros((2 * N, len(basis)))
    B = np.zeros((2 * N, 1))
    for row, poly in enumerate(polynomials):
        for exponent, coefficient in poly.terms.items():
            if exponent[-1]:
                B[row, 0] += coefficient
            else:
                A[row, basis.index(exponent[:-1])] += coefficient

    x_star = _consensus_optimum(objectives)
    gradients = np.array([objective.derivative(objective.variables[0])([x_star]) for objective in objectives])
    z_eq, *_ = np.linalg.lstsq(K, -alpha * gradients, rcond=None)
    equilibrium = np.concatenate([np.full(N, x_star), z_eq])

    weights = monitor_weights(w, 1)
    W = np.diag(np.concatenate([1.0 - weights, weights]))
    logger.debug("Polynomial system built: N=%d, update degree %d, x*=%.6g", N, degree, x_star)
    return PolySystem(
        objectives=tuple(objectives),
        K=K,
        alpha=float(alpha),
        attack_node=attack_node,
        monitor_node=monitor_node,
        w=float(weights[0]),
        update=polynomials,
        basis=basis,
        A=A,
        B=B,
        C_p=build_performance_output(N, 1),
        C_m=W @ monitor_selector(N, 1, monitor_node),
        degree=degree,
        equilibrium=equilibrium,
    )


def simulate_poly(psys: PolySystem, x0: np.ndarray, attack: Sequence[float], horizon: int) -> np.ndarray:
    samples = np.zeros(horizon)
    attack = np.asarray(attack, dtype=float).ravel()
    samples[: min(horizon, attack.size)] = attack[:horizon]
    states = [np.asarray(x0, dtype=float)]
    for k in range(horizon):
        states.append(psys.step(states[-1], samples[k]))
    return np.asarray(states)


@dataclass(frozen=True)
class SosCertificate:
    gamma: float
    D: np.ndarray
    gram: np.ndarray
    storage_basis: Tuple[Exponent, ...]
    gram_basis: Tuple[Exponent, ...]
    epsilon: float
    basis_degree: int
    include_attack: bool
    region_radius: Optional[float] = None
    multiplier: Optional[np.ndarray] = None
    coefficient_residual: float = 0.0
    gram_min_eigenvalue: float = 0.0
    storage_min_eigenvalue: float = 0.0

    def storage(self, xi: np.ndarray) -> float:
        z = _evaluate_monomials(self.storage_basis, xi)
        return float(z @ self.D @ z)


def _evaluate_monomials(basis: Sequence[Exponent], point: np.ndarray) -> np.ndarray:
    point = np.asarray(point, dtype=float)
    return np.array([np.prod(point ** np.asarray(exponent)) for exponent in basis])


def _shifted_update(psys: PolySystem, include_attack: bool) -> Tuple[List[sympy.Poly], List[sympy.Symbol]]:
    """Update in deviation coordinates ξ = x̄ − x̄_eq with constant terms removed."""
    names = psys.state_names
    xi = sympy.symbols(" ".join(f"d{name}" for name in names))
    a = sympy.Symbol("a")
    originals = [sympy.Symbol(name) for name in names]
    generators = list(xi) + ([a] if include_attack else [])
    shift = {orig: d + float(eq) for orig, d, eq in zip(originals, xi, psys.equilibrium)}
    shift[a] = a if include_attack else 0

    shifted = []
    for poly, eq in zip(psys.update, psys.equilibrium):
        expression = sympy.expand(poly.to_sympy().subs(shift, simultaneous=True) - float(eq))
        terms = sympy.Poly(expression, *generators).terms()
        scale = max((abs(float(c)) for _, c in terms), default=1.0)
        kept = {m: float(c) for m, c in terms if sum(m) > 0 and abs(float(c)) > CHOP * scale}
        expression = sum((c * sympy.Mul(*[g ** e for g, e in zip(generators, m)]) for m, c in kept.items()), sympy.Integer(0))
        shifted.append(sympy.Poly(expression, *generators))
    return shifted, generators


def _quadratic_terms(M: np.ndarray, width: int) -> Dict[Exponent, float]:
    terms: Dict[Exponent, float] = {}
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            if M[i, j] == 0:
                continue
            exponent = [0] * width
            exponent[i] += 1
            exponent[j] += 1
            key = tuple(exponent)
            terms[key] = terms.get(key, 0.0) + float(M[i, j])
    return terms


def sos_security_bound(
    psys: PolySystem,
    epsilon: float,
    basis_degree: Optional[int] = None,
    region_radius: Optional[float] = None,
    include_attack: bool = False,
    config: Optional[Config] = None,
) -> Tuple[float, SosCertificate]:
    """Upper bound ε·γ from a polynomial storage S = Z(ξ)ᵀ D Z(ξ).

    The dissipation residual
        Z(ξ)ᵀDZ(ξ) − Z(F(ξ))ᵀDZ(F(ξ)) + γ‖C_m ξ‖² − ‖C_p ξ‖²
    must admit a PSD Gram matrix. By default the attack is set to zero inside
    the composition and D ⪰ margin·I; with ``include_attack`` the attack is a
    further indeterminate and D ⪰ 0. ``region_radius`` only asks for the
    inequality on ‖ξ‖ ≤ r through one SOS multiplier.
    """
    config = config or Config.default()
    if epsilon < 0:
        raise DimensionError(f"epsilon must be nonnegative, got {epsilon}")
    basis_degree = psys.degree if basis_degree is None else int(basis_degree)
    storage_degree = basis_degree // psys.degree
    if storage_degree < 1:
        raise SosError(
            f"basis degree {basis_degree} is below the update degree {psys.degree}; raise it to at least {psys.degree}"
        )
    half_degree = storage_degree * psys.degree
    if 2 * half_degree > MAX_SOS_DEGREE:
        raise SosError(f"the SOS program would have degree {2 * half_degree}, above the cap {MAX_SOS_DEGREE}")

    shifted, generators = _shifted_update(psys, include_attack)
    states = 2 * psys.N
    width = len(generators)
    pad = (0,) * (width - states)

    storage_basis = monomials(states, 1, storage_degree)
    composed = []
    for exponent in storage_basis:
        product = sympy.Poly(1, *generators)
        for poly, power in zip(shifted, exponent):
            if power:
                product = product * poly ** power
        composed.append(product)

    rows: Dict[Exponent, int] = {}

    def row(exponent: Exponent) -> int:
        return rows.setdefault(exponent, len(rows))

    size_d = len(storage_basis)
    d_entries = []
    for i in range(size_d):
        for j in range(size_d):
            d_entries.append((row(_add(storage_basis[i], storage_basis[j]) + pad), i, j, 1.0))
            for monom, coeff in (composed[i] * composed[j]).terms():
                d_entries.append((row(tuple(monom)), i, j, -float(coeff)))

    gamma_terms = {e + pad: c for e, c in _quadratic_terms(psys.C_m.T @ psys.C_m, states).items()}
    performance_terms = {e + pad: c for e, c in _quadratic_terms(psys.C_p.T @ psys.C_p, states).items()}
    for exponent in list(gamma_terms) + list(performance_terms):
        row(exponent)

    gram_basis = monomials(width, 1, half_degree)
    g_entries = [(row(_add(gram_basis[k], gram_basis[l])), k, l, -1.0) for k in range(len(gram_basis)) for l in range(len(gram_basis))]

    s_entries = []
    multiplier_basis: List[Exponent] = []
    if region_radius is not None:
        if region_radius <= 0:
            raise SosError(f"region radius must be positive, got {region_radius}")
        multiplier_basis = monomials(width, 1, max(1, half_degree - 1))
        for k, left in enumerate(multiplier_basis):
            for l, right in enumerate(multiplier_basis):
                base = _add(left, right)
                s_entries.append((row(base), k, l, -region_radius ** 2))
                for index in range(states):
                    bump = [0] * width
                    bump[index] = 2
                    s_entries.append((row(_add(base, tuple(bump))), k, l, 1.0))

    count = len(rows)
    rhs = np.zeros(count)
    for exponent, coefficient in performance_terms.items():
        rhs[rows[exponent]] += coefficient
    gamma_vector = np.zeros(count)
    for exponent, coefficient in gamma_terms.items():
        gamma_vector[rows[exponent]] += coefficient

    problem = SdpProblem()
    problem.add_matrix("D", size_d, psd=include_attack)
    problem.add_matrix("G", len(gram_basis), psd=True)
    problem.add_scalar("gamma", lower=0.0)
    problem.objective = {"gamma": 1.0}
    matrix_terms = {
        "D": vec_selector(size_d, d_entries, count),
        "G": vec_selector(len(gram_basis), g_entries, count),
    }
    if multiplier_basis:
        problem.add_matrix("S", len(multiplier_basis), psd=True)
        matrix_terms["S"] = vec_selector(len(multiplier_basis), s_entries, count)
    if not include_attack:
        problem.add_lmi(
            LinearMatrixInequality(
                constant=np.zeros((size_d, size_d)),
                congruence_terms=[CongruenceTerm("D", np.eye(size_d), np.eye(size_d))],
                sense=">=",
                margin=config.lmi_margin,
                label="storage",
            )
        )
    block = EqualityBlock(rhs=rhs, matrix_terms=matrix_terms, scalar_terms={"gamma": gamma_vector}, label="coefficients")
    problem.add_equality(block)

    logger.info(
        "SOS program: %d coefficient equations, Gram %d x %d, storage %d x %d",
        count,
        len(gram_basis),
        len(gram_basis),
        size_d,
        size_d,
    )
    solution = solve_sdp(problem, config)
    if not solution.feasible:
        hint = "increase basis_degree" if region_radius is not None else "increase basis_degree or set region_radius"
        raise SosError(f"SOS program infeasible at basis degree {basis_degree}; {hint} (a bound may still exist)")

    values = solution.values
    gamma = max(0.0, float(values["gamma"]))
    certificate = SosCertificate(
        gamma=gamma,
        D=values["D"],
        gram=values["G"],
        storage_basis=tuple(storage_basis),
        gram_basis=tuple(gram_basis),
        epsilon=float(epsilon),
        basis_degree=basis_degree,
        include_attack=include_attack,
        region_radius=region_radius,
        multiplier=values.get("S"),
        coefficient_residual=float(np.max(np.abs(equality_residual(block, values)))) if count else 0.0,
        gram_min_eigenvalue=float(np.linalg.eigvalsh(values["G"])[0]),
        storage_min_eigenvalue=float(np.linalg.eigvalsh(values["D"])[0]),
    )
    bound = float(epsilon) * gamma
    logger.info("SOS bound %.6g (gamma=%.6g, basis degree %d)", bound, gamma, basis_degree)
    return bound, certificate


@dataclass(frozen=True)
class SosReplay:
    trajectories: int
    checked: int
    max_violation: float
    passed: bool


def replay_sos_certificate(
    psys: PolySystem,
    certificate: SosCertificate,
    trajectories: int = 100,
    steps: int = 20,
    radius: float = 0.5,
    attack_scale: float = 0.0,
    seed: int = 0,
    tol: float = 1e-6,
) -> SosReplay:
    """Pointwise storage check along simulated runs started within ``radius`` of the equilibrium.

    Attacks are only injected when the certificate was built with the attack
    as an indeterminate. Samples outside the certified region are skipped.
    """
    if attack_scale and not certificate.include_attack:
        raise SosError("this certificate was computed without the attack input; replay with attack_scale=0")
    states = 2 * psys.N
    worst = 0.0
    checked = 0
    for rng in spawn_generators(seed, trajectories):
        direction = rng.standard_normal(states)
        xi = direction / np.linalg.norm(direction) * radius * rng.uniform()
        for _ in range(steps):
            attack = attack_scale * rng.standard_normal() if attack_scale else 0.0
            nxt = psys.step(xi + psys.equilibrium, attack) - psys.equilibrium
            if certificate.region_radius is None or np.linalg.norm(xi) <= certificate.region_radius:
                before, after = certificate.storage(xi), certificate.storage(nxt)
                supply = certificate.gamma * float(np.sum((psys.C_m @ xi) ** 2)) - float(np.sum((psys.C_p @ xi) ** 2))
                scale = max(1.0, abs(before), abs(after), abs(supply))
                worst = max(worst, (after - before - supply) / scale)
                checked += 1
            xi = nxt
    return SosReplay(trajectories=trajectories, checked=checked, max_violation=worst, passed=worst <= tol)


def sos_report(bound: float, certificate: SosCertificate) -> Dict[str, Any]:
    return {
        "gamma_pl": bound,
        "epsilon": certificate.epsilon,
        "basis_degree": certificate.basis_degree,
        "include_attack": certificate.include_attack,
        "region_radius": certificate.region_radius,
        "certificate_residuals": {
            "coefficient_match": certificate.coefficient_residual,
            "gram_min_eigenvalue": certificate.gram_min_eigenvalue,
            "storage_min_eigenvalue": certificate.storage_min_eigenvalue,
        },
    }
