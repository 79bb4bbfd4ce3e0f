import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import Config
from errors import DesignError, GtGuardError
from metric import MetricMode, auto_mode, metric_for_scenario, scenario_verdict
from model import AttackChannels, QuadraticObjective
from network import Network
from utils import derive_seed, parallel_map

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-9

Edge = Tuple[int, int]
Candidate = Union[int, Edge, None]


class EdgeMode(str, Enum):
    ADD = "add"
    REMOVE = "remove"


@dataclass(frozen=True)
class AttackBelief:
    """Suspected attack nodes and their probabilities."""

    nodes: Tuple[int, ...]
    probabilities: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.nodes) != len(self.probabilities):
            raise DesignError(f"{len(self.nodes)} attack nodes but {len(self.probabilities)} probabilities")
        if not self.nodes:
            raise DesignError("the attack belief needs at least one node")
        if len(set(self.nodes)) != len(self.nodes):
            raise DesignError(f"attack nodes repeat: {list(self.nodes)}")
        if any(p < 0 for p in self.probabilities):
            raise DesignError(f"probabilities must be nonnegative, got {list(self.probabilities)}")
        if abs(sum(self.probabilities) - 1.0) > 1e-12:
            raise DesignError(f"probabilities sum to {sum(self.probabilities):.15g}, not 1")

    @classmethod
    def uniform(cls, nodes: Sequence[int]) -> "AttackBelief":
        nodes = tuple(int(node) for node in nodes)
        return cls(nodes, tuple(1.0 / len(nodes) for _ in nodes)) if nodes else cls((), ())

    @classmethod
    def single(cls, node: int) -> "AttackBelief":
        return cls((int(node),), (1.0,))

    def active(self) -> List[Tuple[int, float]]:
        """Attackers with nonzero belief; zero-belief nodes never enter the sum."""
        return [(node, p) for node, p in zip(self.nodes, self.probabilities) if p > 0]


@dataclass(frozen=True)
class EdgeCandidate:
    i: int
    j: int
    cost: float = 0.0

    def __post_init__(self) -> None:
        if self.cost < 0:
            raise DesignError(f"edge ({self.i}, {self.j}) has negative cost {self.cost}")
        if self.i == self.j:
            raise DesignError(f"edge ({self.i}, {self.j}) is a self-loop")

    @property
    def edge(self) -> Edge:
        return (self.i, self.j) if self.i < self.j else (self.j, self.i)


@dataclass(frozen=True)
class CandidateRow:
    candidate: Candidate
    cost: float
    metrics: Dict[int, float] = field(default_factory=dict)
    fixed_cost: float = 0.0
    error: Optional[str] = None


def _number(value: float) -> Any:
    return "UNBOUNDED" if math.isinf(value) else value


@dataclass(frozen=True)
class DesignReport:
    kind: str
    winner: Candidate
    cost: float
    table: Tuple[CandidateRow, ...]
    metric_mode: Optional[MetricMode] = None

    def row(self, candidate: Candidate) -> CandidateRow:
        for row in self.table:
            if row.candidate == candidate:
                return row
        raise KeyError(candidate)

    @property
    def resolved(self) -> bool:
        """False when every option was unbounded or failed."""
        return not math.isinf(self.cost)

    def frame(self) -> pd.DataFrame:
        records = []
        for row in self.table:
            record: Dict[str, Any] = {
                "candidate": _label(row.candidate),
                "fixed_cost": row.fixed_cost,
                "expected_cost": row.cost,
                "winner": row.candidate == self.winner,
                "error": row.error or "",
            }
            for attacker, value in sorted(row.metrics.items()):
                record[f"gamma_va{attacker}"] = value
            records.append(record)
        return pd.DataFrame.from_records(records)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "mode": None if self.metric_mode is None else self.metric_mode.value,
            "winner": _label(self.winner),
            "cost": _number(self.cost),
            "table": [
                {
                    "candidate": _label(row.candidate),
                    "fixed_cost": row.fixed_cost,
                    "expected_cost": _number(row.cost),
                    "metrics": {str(node): _number(value) for node, value in sorted(row.metrics.items())},
                    "error": row.error,
                }
                for row in self.table
            ],
        }


def _label(candidate: Candidate) -> str:
    if candidate is None:
        return "none"
    if isinstance(candidate, tuple):
        return f"e{candidate[0]},{candidate[1]}"
    return f"v{candidate}"


def _sort_key(candidate: Candidate) -> Tuple:
    # The empty edge set sorts first so it wins ties against any real edge.
    return (0,) if candidate is None else (1, candidate)


def _pair_seed(seed: int, label: str, attacker: int, monitor_node: int) -> int:
    return derive_seed(seed, f"{label}:va{attacker}:vm{monitor_node}")


def expected_cost(metrics: Dict[int, float], belief: AttackBelief, scale: float = 1.0) -> float:
    total = 0.0
    for node, probability in belief.active():
        value = metrics[node]
        if math.isinf(value):
            return math.inf
        total += probability * value
    return scale * total


def select_winner(rows: Sequence[CandidateRow]) -> CandidateRow:
    """Lowest cost; near-ties within TIE_TOLERANCE go to the smallest candidate."""
    finite = [row for row in rows if not math.isinf(row.cost) and row.error is None]
    if not finite:
        raise DesignError("every candidate is unbounded or failed")
    best = min(row.cost for row in finite)
    tied = [row for row in finite if row.cost - best <= TIE_TOLERANCE * max(abs(best), 1e-300)]
    return min(tied, key=lambda row: _sort_key(row.candidate))


def sweep_mode(
    mode: Optional[MetricMode],
    placements: Iterable[Tuple[Network, int, int, str]],
    objectives: Sequence[QuadraticObjective],
    alpha: float,
    w,
    seed: int,
    config: Config,
    attack_channels: AttackChannels = AttackChannels.SHARED,
) -> MetricMode:
    """One SDP mode for a whole sweep, so every candidate is scored on the same scale.

    ``placements`` holds (network, attacker, monitor, label). An explicit mode
    wins; otherwise CYCLO is used when any placement is exposed through an
    invariant zero. Placements that cannot be classified are skipped.
    """
    if mode is not None:
        return MetricMode(mode)
    verdicts = []
    for network, attacker, monitor_node, label in placements:
        try:
            verdicts.append(
                scenario_verdict(
                    network,
                    objectives,
                    alpha,
                    attacker,
                    monitor_node,
                    w,
                    seed=_pair_seed(seed, label, attacker, monitor_node),
                    config=config,
                    attack_channels=attack_channels,
                )
            )
        except GtGuardError as exc:
            logger.debug("Placement %s (va%d, vm%d) not classified: %s", label, attacker, monitor_node, exc)
    chosen = auto_mode(verdicts)
    logger.info("Design sweep scores every candidate in %s mode", chosen.value)
    return chosen


def _evaluate(
    network: Network,
    objectives: Sequence[QuadraticObjective],
    alpha: float,
    monitor_node: int,
    w,
    epsilon: float,
    belief: AttackBelief,
    mode: MetricMode,
    seed: int,
    label: str,
    config: Config,
    attack_channels: AttackChannels,
) -> Dict[int, float]:
    metrics = {}
    for attacker, _ in belief.active():
        result = metric_for_scenario(
            network,
            objectives,
            alpha,
            attacker,
            monitor_node,
            w,
            epsilon,
            mode=mode,
            seed=_pair_seed(seed, label, attacker, monitor_node),
            config=config,
            attack_channels=attack_channels,
        )
        metrics[attacker] = result.value
    return metrics


def optimal_monitor(
    network: Network,
    objectives: Sequence[QuadraticObjective],
    alpha: float,
    w,
    epsilon: float,
    belief: AttackBelief,
    candidates: Optional[Sequence[int]] = None,
    mode: Optional[MetricMode] = None,
    belief_scale: float = 1.0,
    seed: int = 0,
    workers: int = 1,
    config: Optional[Config] = None,
    attack_channels: AttackChannels = AttackChannels.SHARED,
) -> DesignReport:
    """Sweep every monitor node and keep the one with the lowest expected metric."""
    config = config or Config.default()
    nodes = list(range(1, network.node_count + 1)) if candidates is None else [int(node) for node in candidates]
    for node in belief.nodes + tuple(nodes):
        if not 1 <= node <= network.node_count:
            raise DesignError(f"node {node} outside 1..{network.node_count}")

    placements = [(network, attacker, node, "monitor") for node in nodes for attacker, _ in belief.active()]
    chosen = sweep_mode(mode, placements, objectives, alpha, w, seed, config, attack_channels)

    def evaluate(monitor_node: int) -> CandidateRow:
        try:
            metrics = _evaluate(
                network, objectives, alpha, monitor_node, w, epsilon, belief, chosen, seed, "monitor", config, attack_channels
            )
        except GtGuardError as exc:
            logger.warning("Monitor candidate v%d failed: %s", monitor_node, exc)
            return CandidateRow(candidate=monitor_node, cost=math.inf, error=str(exc))
        return CandidateRow(candidate=monitor_node, cost=expected_cost(metrics, belief, belief_scale), metrics=metrics)

    rows = sorted(parallel_map(evaluate, nodes, workers), key=lambda row: _sort_key(row.candidate))
    try:
        winner = select_winner(rows)
    except DesignError:
        raise DesignError("no monitor secures this network: every candidate is unbounded or failed") from None

    logger.info("Optimal monitor: v%d (expected cost %.6g)", winner.candidate, winner.cost)
    return DesignReport(kind="monitor", winner=winner.candidate, cost=winner.cost, table=tuple(rows), metric_mode=chosen)


def _modified_network(network: Network, candidate: EdgeCandidate, mode: EdgeMode, edge_weight: float) -> Network:
    i, j = candidate.edge
    if mode == EdgeMode.ADD:
        return network.with_edge(i, j, edge_weight)
    return network.without_edge(i, j)


def optimal_edge(
    network: Network,
    objectives: Sequence[QuadraticObjective],
    alpha: float,
    monitor_node: int,
    w,
    epsilon: float,
    belief: AttackBelief,
    candidates: Sequence[EdgeCandidate],
    mode: EdgeMode = EdgeMode.ADD,
    edge_weight: float = 1.0,
    metric_mode: Optional[MetricMode] = None,
    seed: int = 0,
    workers: int = 1,
    config: Optional[Config] = None,
    attack_channels: AttackChannels = AttackChannels.SHARED,
) -> DesignReport:
    """Compare the unchanged network with every single-edge change.

    The cost of a change is its fixed cost plus the expected metric on the
    modified network. Invalid candidates get an error row and the sweep goes on.
    """
    config = config or Config.default()
    mode = EdgeMode(mode)
    options: List[Optional[EdgeCandidate]] = [None] + list(candidates)

    targets: Dict[Candidate, Union[Network, GtGuardError]] = {}
    for option in options:
        key = None if option is None else option.edge
        try:
            targets[key] = network if option is None else _modified_network(network, option, mode, edge_weight)
        except GtGuardError as exc:
            targets[key] = exc

    placements = [
        (target, attacker, monitor_node, f"edge:{_label(key)}")
        for key, target in targets.items()
        if isinstance(target, Network)
        for attacker, _ in belief.active()
    ]
    chosen = sweep_mode(metric_mode, placements, objectives, alpha, w, seed, config, attack_channels)

    def evaluate(option: Optional[EdgeCandidate]) -> CandidateRow:
        key = None if option is None else option.edge
        fixed = 0.0 if option is None else option.cost
        try:
            target = targets[key]
            if isinstance(target, GtGuardError):
                raise target
            metrics = _evaluate(
                target,
                objectives,
                alpha,
                monitor_node,
                w,
                epsilon,
                belief,
                chosen,
                seed,
                f"edge:{_label(key)}",
                config,
                attack_channels,
            )
        except GtGuardError as exc:
            logger.warning("Edge candidate %s failed: %s", _label(key), exc)
            return CandidateRow(candidate=key, cost=math.inf, fixed_cost=fixed, error=str(exc))
        return CandidateRow(candidate=key, cost=fixed + expected_cost(metrics, belief), metrics=metrics, fixed_cost=fixed)

    rows = sorted(parallel_map(evaluate, options, workers), key=lambda row: _sort_key(row.candidate))
    kind = f"edge-{mode.value}"
    try:
        winner = select_winner(rows)
    except DesignError:
        logger.warning("Every edge option is unbounded; keeping the network unchanged")
        baseline = rows[0]
        return DesignReport(kind=kind, winner=None, cost=baseline.cost, table=tuple(rows), metric_mode=chosen)

    logger.info("Optimal edge change: %s (cost %.6g)", _label(winner.candidate), winner.cost)
    return DesignReport(kind=kind, winner=winner.candidate, cost=winner.cost, table=tuple(rows), metric_mode=chosen)


@dataclass(frozen=True)
class RandomizedEdgeReport:
    """Edge sweeps repeated over independent objective draws."""

    kind: str
    sweeps: Tuple[DesignReport, ...]

    @property
    def draws(self) -> int:
        return len(self.sweeps)

    def candidates(self) -> List[Candidate]:
        return [row.candidate for row in self.sweeps[0].table] if self.sweeps else []

    def costs(self, candidate: Candidate) -> List[float]:
        """Total cost of ``candidate`` in every draw (inf where unbounded or failed)."""
        return [sweep.row(candidate).cost for sweep in self.sweeps]

    def wins(self) -> Dict[str, int]:
        counts = {_label(candidate): 0 for candidate in self.candidates()}
        for sweep in self.sweeps:
            if sweep.resolved:
                counts[_label(sweep.winner)] += 1
        return counts

    @property
    def unresolved(self) -> int:
        return sum(1 for sweep in self.sweeps if not sweep.resolved)

    @property
    def winner(self) -> Candidate:
        """Most frequent per-draw winner; ties go to the smallest candidate."""
        wins = self.wins()
        best = max(wins.values(), default=0)
        if best == 0:
            return None
        tied = [candidate for candidate in self.candidates() if wins[_label(candidate)] == best]
        return min(tied, key=_sort_key)

    def frame(self) -> pd.DataFrame:
        frames = []
        for index, sweep in enumerate(self.sweeps):
            frame = sweep.frame()
            frame.insert(0, "draw", index)
            frame["mode"] = None if sweep.metric_mode is None else sweep.metric_mode.value
            frames.append(frame)
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()

    def summary(self, candidate: Candidate) -> Dict[str, Any]:
        costs = np.asarray(self.costs(candidate), dtype=float)
        finite = costs[np.isfinite(costs)]
        quartiles = np.percentile(finite, [25, 50, 75]) if finite.size else [None, None, None]
        return {
            "candidate": _label(candidate),
            "fixed_cost": self.sweeps[0].row(candidate).fixed_cost,
            "costs": [_number(float(value)) for value in costs],
            "unbounded_draws": int(costs.size - finite.size),
            "min": float(finite.min()) if finite.size else None,
            "q25": None if quartiles[0] is None else float(quartiles[0]),
            "median": None if quartiles[1] is None else float(quartiles[1]),
            "q75": None if quartiles[2] is None else float(quartiles[2]),
            "max": float(finite.max()) if finite.size else None,
            "wins": self.wins()[_label(candidate)],
        }

    def as_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "draws": self.draws,
            "winner": _label(self.winner) if self.unresolved < self.draws else None,
            "wins": self.wins(),
            "unresolved": self.unresolved,
            "modes": sorted({sweep.metric_mode.value for sweep in self.sweeps if sweep.metric_mode is not None}),
            "candidates": [self.summary(candidate) for candidate in self.candidates()],
        }


def randomized_edge_sweep(
    network: Network,
    objectives_for_draw: Callable[[int], Sequence[QuadraticObjective]],
    draws: int,
    alpha: float,
    monitor_node: int,
    w,
    epsilon: float,
    belief: AttackBelief,
    candidates: Sequence[EdgeCandidate],
    mode: EdgeMode = EdgeMode.ADD,
    edge_weight: float = 1.0,
    metric_mode: Optional[MetricMode] = None,
    seed: int = 0,
    workers: int = 1,
    config: Optional[Config] = None,
    attack_channels: AttackChannels = AttackChannels.SHARED,
) -> RandomizedEdgeReport:
    """Run the edge sweep on ``draws`` objective draws and collect the cost distribution and win counts."""
    if draws < 1:
        raise DesignError(f"the randomized edge sweep needs at least one draw, got {draws}")
    sweeps = []
    for index in range(draws):
        sweeps.append(
            optimal_edge(
                network,
                objectives_for_draw(index),
                alpha,
                monitor_node,
                w,
                epsilon,
                belief,
                candidates,
                mode=mode,
                edge_weight=edge_weight,
                metric_mode=metric_mode,
                seed=derive_seed(seed, f"draw{index}"),
                workers=workers,
                config=config,
                attack_channels=attack_channels,
            )
        )
    report = RandomizedEdgeReport(kind=f"edge-{EdgeMode(mode).value}-randomized", sweeps=tuple(sweeps))
    logger.info("Randomized edge sweep over %d draws: wins %s", draws, report.wins())
    return report
