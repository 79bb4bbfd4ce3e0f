"""Small backend-neutral SDP layer.

A problem is a set of symmetric matrix variables and scalar variables, a
linear objective over the scalars, affine symmetric matrix inequalities and
linear equality blocks. The cvxpy backend below is the only one shipped.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cvxpy as cp
import numpy as np
import scipy.linalg
import scipy.sparse

from config import Config
from errors import DimensionError, SolverError

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"

_SOLVED = {cp.OPTIMAL, cp.OPTIMAL_INACCURATE}
_INFEASIBLE = {cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE}


@dataclass(frozen=True)
class MatrixVariable:
    name: str
    size: int
    psd: bool = False
    # Optional spectral box −bound·I ⪯ X ⪯ bound·I.
    bound: Optional[float] = None


@dataclass(frozen=True)
class ScalarVariable:
    name: str
    lower: Optional[float] = None


@dataclass(frozen=True)
class CongruenceTerm:
    """coeff · left @ X @ right for the matrix variable ``variable``."""

    variable: str
    left: np.ndarray
    right: np.ndarray
    coeff: float = 1.0


@dataclass
class LinearMatrixInequality:
    """constant + Σ sᵢ·Mᵢ + Σ congruence terms  (⪯ or ⪰)  −margin/+margin·I."""

    constant: np.ndarray
    scalar_terms: List[Tuple[str, np.ndarray]] = field(default_factory=list)
    congruence_terms: List[CongruenceTerm] = field(default_factory=list)
    sense: str = "<="
    margin: float = 0.0
    label: str = ""

    def __post_init__(self) -> None:
        if self.sense not in ("<=", ">="):
            raise DimensionError(f"LMI sense must be '<=' or '>=', got '{self.sense}'")
        self.constant = np.atleast_2d(np.asarray(self.constant, dtype=float))

    @property
    def size(self) -> int:
        return self.constant.shape[0]


@dataclass
class EqualityBlock:
    """Σ_v E_v·vec(X_v) + Σ_s e_s·s = rhs, with vec column-major."""

    rhs: np.ndarray
    matrix_terms: Dict[str, scipy.sparse.spmatrix] = field(default_factory=dict)
    scalar_terms: Dict[str, np.ndarray] = field(default_factory=dict)
    label: str = ""


@dataclass
class SdpProblem:
    matrices: List[MatrixVariable] = field(default_factory=list)
    scalars: List[ScalarVariable] = field(default_factory=list)
    objective: Dict[str, float] = field(default_factory=dict)
    lmis: List[LinearMatrixInequality] = field(default_factory=list)
    equalities: List[EqualityBlock] = field(default_factory=list)

    def matrix(self, name: str) -> MatrixVariable:
        for variable in self.matrices:
            if variable.name == name:
                return variable
        raise KeyError(name)

    def add_matrix(self, name: str, size: int, psd: bool = False, bound: Optional[float] = None) -> None:
        self.matrices.append(MatrixVariable(name, size, psd, bound))

    def add_scalar(self, name: str, lower: Optional[float] = None) -> None:
        self.scalars.append(ScalarVariable(name, lower))

    def add_lmi(self, lmi: LinearMatrixInequality) -> None:
        self.lmis.append(lmi)

    def add_equality(self, block: EqualityBlock) -> None:
        self.equalities.append(block)


@dataclass(frozen=True)
class SdpSolution:
    status: str
    objective: float
    values: Dict[str, np.ndarray]
    residual: float
    solver: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == OPTIMAL


def _lmi_value(lmi: LinearMatrixInequality, values: Dict[str, np.ndarray]) -> np.ndarray:
    total = lmi.constant.copy()
    for name, matrix in lmi.scalar_terms:
        total = total + float(values[name]) * matrix
    for term in lmi.congruence_terms:
        total = total + term.coeff * term.left @ values[term.variable] @ term.right
    return 0.5 * (total + total.T)


def equality_residual(block: EqualityBlock, values: Dict[str, np.ndarray]) -> np.ndarray:
    total = -np.asarray(block.rhs, dtype=float)
    for name, matrix in block.matrix_terms.items():
        total = total + matrix @ values[name].reshape(-1, order="F")
    for name, vector in block.scalar_terms.items():
        total = total + float(values[name]) * np.asarray(vector, dtype=float)
    return total


def primal_residual(problem: SdpProblem, values: Dict[str, np.ndarray]) -> float:
    """Largest violation of any cone or equality constraint at ``values``."""
    worst = 0.0
    for lmi in problem.lmis:
        eigenvalues = scipy.linalg.eigvalsh(_lmi_value(lmi, values))
        if lmi.sense == "<=":
            worst = max(worst, float(eigenvalues[-1]) + lmi.margin)
        else:
            worst = max(worst, lmi.margin - float(eigenvalues[0]))
    for variable in problem.matrices:
        if variable.psd:
            worst = max(worst, -float(scipy.linalg.eigvalsh(values[variable.name])[0]))
    for block in problem.equalities:
        residual = equality_residual(block, values)
        if residual.size:
            worst = max(worst, float(np.max(np.abs(residual))))
    for variable in problem.scalars:
        if variable.lower is not None:
            worst = max(worst, variable.lower - float(values[variable.name]))
    return worst


def residual_scale(problem: SdpProblem, values: Dict[str, np.ndarray]) -> float:
    """Magnitude of the fixed and scalar-weighted LMI data at ``values``, at least 1.

    Congruence terms are left out: a large storage matrix must not excuse a
    violation of the supply terms.
    """
    scale = 1.0
    for lmi in problem.lmis:
        size = np.linalg.norm(lmi.constant, 2)
        for name, matrix in lmi.scalar_terms:
            size += abs(float(values[name])) * np.linalg.norm(np.atleast_2d(matrix), 2)
        scale = max(scale, float(size))
    for block in problem.equalities:
        scale = max(scale, float(np.max(np.abs(block.rhs), initial=0.0)))
    return scale


def residual_tolerance(problem: SdpProblem, values: Dict[str, np.ndarray], config: Config) -> float:
    return config.sdp_residual_tol * residual_scale(problem, values)


class CvxpyBackend:
    """Translate an SdpProblem into cvxpy and try the preferred solvers in order."""

    def __init__(self, config: Optional[Config] = None) -> None:
        self.config = config or Config.default()

    def _build(self, problem: SdpProblem) -> Tuple[cp.Problem, Dict[str, cp.Variable]]:
        variables: Dict[str, cp.Variable] = {}
        constraints = []
        for declared in problem.matrices:
            variable = cp.Variable((declared.size, declared.size), PSD=True, name=declared.name) if declared.psd else cp.Variable(
                (declared.size, declared.size), symmetric=True, name=declared.name
            )
            variables[declared.name] = variable
            if declared.bound is not None:
                identity = np.eye(declared.size)
                constraints += [variable << declared.bound * identity, variable >> -declared.bound * identity]
        for declared in problem.scalars:
            variable = cp.Variable(name=declared.name)
            variables[declared.name] = variable
            if declared.lower is not None:
                constraints.append(variable >= declared.lower)

        for lmi in problem.lmis:
            expression = cp.Constant(lmi.constant)
            for name, matrix in lmi.scalar_terms:
                expression = expression + cp.multiply(variables[name], matrix)
            for term in lmi.congruence_terms:
                expression = expression + term.coeff * (term.left @ variables[term.variable] @ term.right)
            expression = 0.5 * (expression + expression.T)
            shift = lmi.margin * np.eye(lmi.size)
            if lmi.sense == "<=":
                constraints.append(expression << -shift)
            else:
                constraints.append(expression >> shift)

        for block in problem.equalities:
            expression = cp.Constant(np.zeros(len(block.rhs)))
            for name, matrix in block.matrix_terms.items():
                size = problem.matrix(name).size
                expression = expression + matrix @ cp.reshape(variables[name], (size * size,), order="F")
            for name, vector in block.scalar_terms.items():
                expression = expression + cp.multiply(variables[name], np.asarray(vector, dtype=float))
            constraints.append(expression == np.asarray(block.rhs, dtype=float))

        objective = sum((coeff * variables[name] for name, coeff in problem.objective.items()), cp.Constant(0.0))
        return cp.Problem(cp.Minimize(objective), constraints), variables

    def _candidate_solvers(self) -> List[str]:
        installed = set(cp.installed_solvers())
        preferred = [name for name in self.config.sdp_solvers if name in installed]
        if not preferred:
            raise SolverError(
                f"none of the configured SDP solvers {list(self.config.sdp_solvers)} is installed "
                f"(available: {sorted(installed)})"
            )
        return preferred

    def solve(self, problem: SdpProblem) -> SdpSolution:
        cvx_problem, variables = self._build(problem)
        last_status = ""
        for solver in self._candidate_solvers():
            try:
                cvx_problem.solve(solver=solver, verbose=self.config.solver_verbose)
            except cp.SolverError as exc:
                logger.warning("SDP solver %s failed: %s", solver, exc)
                last_status = f"{solver}: {exc}"
                continue

            status = cvx_problem.status
            last_status = f"{solver}: {status}"
            if status in _INFEASIBLE:
                logger.debug("SDP reported infeasible by %s", solver)
                return SdpSolution(status=INFEASIBLE, objective=np.inf, values={}, residual=np.inf, solver=solver)
            if status in _SOLVED:
                values = {name: np.asarray(variable.value, dtype=float) for name, variable in variables.items()}
                for declared in problem.matrices:
                    matrix = values[declared.name]
                    values[declared.name] = 0.5 * (matrix + matrix.T)
                residual = primal_residual(problem, values)
                tolerance = residual_tolerance(problem, values, self.config)
                if not np.isfinite(residual) or residual > tolerance:
                    logger.warning(
                        "SDP solver %s returned '%s' with residual %.2e above %.2e; trying the next solver",
                        solver,
                        status,
                        residual,
                        tolerance,
                    )
                    last_status = f"{solver}: residual {residual:.2e} above {tolerance:.2e}"
                    continue
                logger.debug("SDP solved by %s (%s), objective %.6g, residual %.2e", solver, status, cvx_problem.value, residual)
                return SdpSolution(
                    status=OPTIMAL,
                    objective=float(cvx_problem.value),
                    values=values,
                    residual=residual,
                    solver=solver,
                )
            logger.warning("SDP solver %s returned status '%s'; trying the next solver", solver, status)

        raise SolverError(f"no SDP solver produced a usable answer ({last_status})", status=last_status)


def solve(problem: SdpProblem, config: Optional[Config] = None) -> SdpSolution:
    return CvxpyBackend(config).solve(problem)


def vec_selector(size: int, entries: Sequence[Tuple[int, int, int, float]], rows: int) -> scipy.sparse.csr_matrix:
    """Sparse map from column-major vec(X) to ``rows`` linear functionals.

    ``entries`` holds (row, i, j, weight) picking weight·X[i, j] into that row.
    """
    if not entries:
        return scipy.sparse.csr_matrix((rows, size * size))
    row_index, column_index, data = zip(*[(row, j * size + i, weight) for row, i, j, weight in entries])
    return scipy.sparse.csr_matrix((data, (row_index, column_index)), shape=(rows, size * size))
