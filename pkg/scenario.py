"""Scenario files: YAML schema, validation and seed fan-out."""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from config import Config
from design import AttackBelief, EdgeCandidate, EdgeMode
from errors import ConfigError, GtGuardError
from metric import MetricMode
from model import AggregatedSystem, AttackChannels, QuadraticObjective, assemble_system, random_objectives
from network import Network, custom_network, path_network, ring_network, star_network
from sos import Polynomial, polynomial_objective
from utils import derive_seed

logger = logging.getLogger(__name__)

ANY = None

# Nested key schema. A dict is a mapping with exactly these keys, a one-element
# list is a sequence whose items follow that schema, ANY is a free leaf.
SCHEMA: Dict[str, Any] = {
    "name": ANY,
    "description": ANY,
    "seed": ANY,
    "graph": {"type": ANY, "N": ANY, "edges": ANY, "weights": ANY, "weight": ANY, "scaling": ANY, "center": ANY},
    "objectives": {"n": ANY, "Q_range": ANY, "c_range": ANY, "explicit": [{"Q": ANY, "c": ANY}]},
    "alpha": ANY,
    "attack": {
        "node": ANY,
        "kind": ANY,
        "scale": ANY,
        "beta": ANY,
        "samples": ANY,
        "initial_state": ANY,
        "perturbation": ANY,
        "channels": ANY,
    },
    "monitor": {"node": ANY, "w": ANY},
    "detector": {"epsilon": ANY, "kappa": ANY, "kappa_k1": ANY, "trials": ANY, "margin": ANY},
    "design": {
        "belief": {"nodes": ANY, "probabilities": ANY},
        "belief_scale": ANY,
        "candidates": ANY,
        "edges": [{"edge": ANY, "cost": ANY}],
        "edge_mode": ANY,
        "edge_weight": ANY,
        "draws": ANY,
    },
    "sos": {"objectives": ANY, "basis_degree": ANY, "region_radius": ANY, "include_attack": ANY},
    "run": {"horizon": ANY, "oracle_L": ANY, "mode": ANY, "replay": ANY, "x0_radius": ANY},
}

ATTACK_KINDS = ("none", "zda", "rd", "custom")
INITIAL_STATES = ("exact", "perturbed", "nominal")


def _check_node(node: yaml.Node, schema: Any, path: str) -> None:
    if schema is ANY:
        return
    if isinstance(schema, dict):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError("expected a mapping", field=path, line=node.start_mark.line + 1)
        for key_node, value_node in node.value:
            key = key_node.value
            child = f"{path}.{key}" if path else key
            if key not in schema:
                raise ConfigError(f"unknown key '{key}'", field=child, line=key_node.start_mark.line + 1)
            _check_node(value_node, schema[key], child)
    elif isinstance(schema, list):
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError("expected a list", field=path, line=node.start_mark.line + 1)
        for index, item in enumerate(node.value):
            _check_node(item, schema[0], f"{path}[{index}]")


def _key_lines(node: Optional[yaml.Node], path: str = "") -> Dict[str, int]:
    lines: Dict[str, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            child = f"{path}.{key_node.value}" if path else str(key_node.value)
            lines[child] = key_node.start_mark.line + 1
            lines.update(_key_lines(value_node, child))
    return lines


@dataclass(frozen=True)
class ScenarioConfig:
    """A validated scenario plus the YAML line of every key for diagnostics."""

    data: Dict[str, Any]
    source: str = "<memory>"
    lines: Dict[str, int] = field(default_factory=dict)

    # --- construction -----------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<memory>") -> "ScenarioConfig":
        try:
            root = yaml.compose(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed YAML in {source}: {exc}", line=mark.line + 1 if mark else 0) from exc
        if root is None:
            raise ConfigError(f"scenario {source} is empty")
        _check_node(root, SCHEMA, "")
        data = yaml.safe_load(text)
        scenario = cls(data=data, source=source, lines=_key_lines(root))
        scenario.validate()
        return scenario

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        if not os.path.exists(path):
            raise ConfigError(f"scenario file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        scenario = cls.from_text(text, source=path)
        logger.info("Scenario loaded from %s", path)
        return scenario

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioConfig":
        return cls.from_text(yaml.safe_dump(data, sort_keys=False))

    def with_overrides(self, seed: Optional[int] = None, horizon: Optional[int] = None,
                       oracle_L: Optional[Sequence[int]] = None, mode: Optional[str] = None,
                       draws: Optional[int] = None) -> "ScenarioConfig":
        data = json.loads(json.dumps(self.data))
        run = data.setdefault("run", {})
        if seed is not None:
            data["seed"] = int(seed)
        if horizon is not None:
            run["horizon"] = int(horizon)
        if oracle_L is not None:
            run["oracle_L"] = [int(L) for L in oracle_L]
        if mode is not None:
            run["mode"] = mode
        if draws is not None:
            data["design"] = dict(data.get("design") or {}, draws=int(draws))
        scenario = ScenarioConfig(data=data, source=self.source, lines=self.lines)
        scenario.validate()
        return scenario

    # --- validation -------------------------------------------------------

    def _error(self, message: str, path: str) -> ConfigError:
        line = self.lines.get(path, 0)
        while not line and "." in path:
            path = path.rsplit(".", 1)[0]
            line = self.lines.get(path, 0)
        return ConfigError(message, field=path, line=line)

    def section(self, name: str) -> Dict[str, Any]:
        value = self.data.get(name) or {}
        if not isinstance(value, dict):
            raise self._error("expected a mapping", name)
        return value

    def _number(self, path: str, value: Any, minimum: Optional[float] = None, integer: bool = False) -> Any:
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self._error(f"expected a number, got {value!r}", path)
        if integer and int(value) != value:
            raise self._error(f"expected an integer, got {value!r}", path)
        if minimum is not None and value < minimum:
            raise self._error(f"must be at least {minimum}, got {value}", path)
        return int(value) if integer else float(value)

    def validate(self) -> None:
        if not isinstance(self.data, dict):
            raise ConfigError(f"scenario {self.source} must be a mapping")
        graph = self.section("graph")
        if "type" not in graph:
            raise self._error("graph.type is required", "graph")
        if graph["type"] not in ("ring", "path", "star", "custom"):
            raise self._error(f"unknown graph type '{graph['type']}'", "graph.type")
        self._number("graph.N", graph.get("N"), minimum=1, integer=True)
        if "alpha" not in self.data:
            raise self._error("alpha is required", "alpha")
        alpha = self._number("alpha", self.data["alpha"])
        if alpha <= 0:
            raise self._error(f"alpha must be positive, got {alpha}", "alpha")

        objectives = self.section("objectives")
        if "explicit" not in objectives:
            for key in ("Q_range", "c_range"):
                bounds = objectives.get(key)
                if not isinstance(bounds, list) or len(bounds) != 2:
                    raise self._error(f"{key} must be a [lo, hi] pair", f"objectives.{key}")
                if bounds[0] > bounds[1]:
                    raise self._error(f"{key} has lo > hi: {bounds}", f"objectives.{key}")

        attack = self.section("attack")
        if attack.get("kind", "none") not in ATTACK_KINDS:
            raise self._error(f"attack.kind must be one of {ATTACK_KINDS}", "attack.kind")
        if attack.get("initial_state", "exact") not in INITIAL_STATES:
            raise self._error(f"attack.initial_state must be one of {INITIAL_STATES}", "attack.initial_state")
        if attack.get("kind") == "custom" and "samples" not in attack:
            raise self._error("a custom attack needs samples", "attack.samples")
        channels = [item.value for item in AttackChannels]
        if attack.get("channels", "shared") not in channels:
            raise self._error(f"attack.channels must be one of {channels}", "attack.channels")
        if "draws" in self.section("design"):
            self._number("design.draws", self.section("design")["draws"], minimum=1, integer=True)

        detector = self.section("detector")
        epsilon = detector.get("epsilon", "calibrate")
        if epsilon != "calibrate":
            self._number("detector.epsilon", epsilon, minimum=0.0)
        if "kappa_k1" in detector and detector["kappa_k1"] != "auto":
            self._number("detector.kappa_k1", detector["kappa_k1"], minimum=1, integer=True)

        run = self.section("run")
        if "horizon" in run:
            self._number("run.horizon", run["horizon"], minimum=1, integer=True)
        for L in run.get("oracle_L", []) or []:
            self._number("run.oracle_L", L, minimum=1, integer=True)
        if run.get("mode") not in (None, "auto", "psd", "cyclo"):
            raise self._error(f"run.mode must be psd, cyclo or auto, got {run['mode']!r}", "run.mode")
        if "seed" in self.data:
            self._number("seed", self.data["seed"], minimum=0, integer=True)

    # --- typed views --------------------------------------------------------

    @property
    def name(self) -> str:
        return str(self.data.get("name") or os.path.splitext(os.path.basename(self.source))[0])

    @property
    def seed(self) -> Optional[int]:
        seed = self.data.get("seed")
        return None if seed is None else int(seed)

    def sub_seed(self, purpose: str) -> int:
        """Seed for one randomized step; every such step needs the master seed."""
        if self.seed is None:
            raise self._error(
                f"the '{purpose}' step is randomized and needs a master seed (set 'seed' or pass --seed)", "seed"
            )
        return derive_seed(self.seed, purpose)

    @property
    def alpha(self) -> float:
        return float(self._number("alpha", self.data["alpha"]))

    @property
    def epsilon(self) -> Optional[float]:
        """Fixed detection threshold, or None when it is to be calibrated."""
        value = self.section("detector").get("epsilon", "calibrate")
        return None if value == "calibrate" else self._number("detector.epsilon", value, minimum=0.0)

    @property
    def horizon(self) -> int:
        return int(self.section("run").get("horizon", 100))

    @property
    def oracle_horizons(self) -> List[int]:
        return [int(L) for L in self.section("run").get("oracle_L", []) or []]

    @property
    def mode(self) -> Optional[MetricMode]:
        mode = self.section("run").get("mode")
        return None if mode in (None, "auto") else MetricMode(mode)

    @property
    def attack_node(self) -> int:
        return int(self.section("attack").get("node", 1))

    @property
    def attack_channels(self) -> AttackChannels:
        return AttackChannels(self.section("attack").get("channels", "shared"))

    @property
    def monitor_node(self) -> int:
        return int(self.section("monitor").get("node", 1))

    @property
    def w(self) -> Any:
        return self.section("monitor").get("w", 0.5)

    def network(self) -> Network:
        graph = self.section("graph")
        N = int(graph["N"])
        weight = float(graph.get("weight", 1.0))
        scaling = graph.get("scaling", "auto")
        try:
            if graph["type"] == "ring":
                return ring_network(N, weight, scaling)
            if graph["type"] == "path":
                return path_network(N, weight, scaling)
            if graph["type"] == "star":
                return star_network(N, weight, scaling, center=int(graph.get("center", 1)))
            return custom_network(N, graph.get("edges") or [], graph.get("weights"), scaling)
        except GtGuardError as exc:
            raise self._error(str(exc), "graph") from exc

    @property
    def has_random_objectives(self) -> bool:
        return "explicit" not in self.section("objectives")

    def objectives(self, draw: Optional[int] = None) -> List[QuadraticObjective]:
        """The agents' objectives. ``draw`` picks an independent random draw; explicit objectives ignore it."""
        section = self.section("objectives")
        N = int(self.section("graph")["N"])
        explicit = section.get("explicit")
        if explicit is not None:
            if len(explicit) != N:
                raise self._error(f"{N} agents but {len(explicit)} explicit objectives", "objectives.explicit")
            try:
                return [QuadraticObjective(Q=item["Q"], c=item["c"]) for item in explicit]
            except (KeyError, GtGuardError) as exc:
                raise self._error(f"invalid explicit objective: {exc}", "objectives.explicit") from exc
        if self.seed is None:
            raise self._error("random objectives need a master seed (set 'seed' or pass --seed)", "objectives")
        seed = self.sub_seed("objectives")
        if draw is not None:
            seed = derive_seed(seed, f"draw{draw}")
        return random_objectives(
            N,
            int(section.get("n", 1)),
            tuple(section["Q_range"]),
            tuple(section["c_range"]),
            seed=seed,
        )

    def system(self, config: Optional[Config] = None) -> AggregatedSystem:
        return assemble_system(
            self.network(),
            self.objectives(),
            self.alpha,
            self.attack_node,
            self.monitor_node,
            self.w,
            config=config,
            attack_channels=self.attack_channels,
        )

    def belief(self) -> AttackBelief:
        belief = self.section("design").get("belief") or {}
        nodes = belief.get("nodes") or [self.attack_node]
        probabilities = belief.get("probabilities")
        try:
            if probabilities is None:
                return AttackBelief.uniform(nodes)
            return AttackBelief(tuple(int(n) for n in nodes), tuple(float(p) for p in probabilities))
        except GtGuardError as exc:
            raise self._error(str(exc), "design.belief") from exc

    @property
    def belief_scale(self) -> float:
        return float(self.section("design").get("belief_scale", 1.0))

    def monitor_candidates(self) -> Optional[List[int]]:
        candidates = self.section("design").get("candidates")
        return None if candidates is None else [int(node) for node in candidates]

    def edge_candidates(self) -> List[EdgeCandidate]:
        candidates = []
        for index, item in enumerate(self.section("design").get("edges") or []):
            try:
                i, j = item["edge"]
                candidates.append(EdgeCandidate(int(i), int(j), float(item.get("cost", 0.0))))
            except (KeyError, TypeError, ValueError, GtGuardError) as exc:
                raise self._error(f"invalid edge candidate #{index + 1}: {exc}", "design.edges") from exc
        return candidates

    @property
    def edge_mode(self) -> EdgeMode:
        return EdgeMode(self.section("design").get("edge_mode", "add"))

    @property
    def edge_weight(self) -> float:
        return float(self.section("design").get("edge_weight", 1.0))

    @property
    def draws(self) -> int:
        """Objective draws for the randomized edge sweep; 1 means a single fixed sweep."""
        return int(self.section("design").get("draws", 1))

    def poly_objectives(self) -> List[Polynomial]:
        section = self.section("sos")
        raw = section.get("objectives")
        N = int(self.section("graph")["N"])
        if not raw:
            raise self._error("the sos section needs per-agent coefficient lists", "sos.objectives")
        if isinstance(raw[0], (int, float)):
            raw = [raw] * N
        if len(raw) != N:
            raise self._error(f"{N} agents but {len(raw)} polynomial objectives", "sos.objectives")
        return [polynomial_objective([float(c) for c in coefficients]) for coefficients in raw]

    def digest(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_scenario(path: str) -> ScenarioConfig:
    return ScenarioConfig.load(path)


def initial_state(scenario: ScenarioConfig, system: AggregatedSystem, x_eq: np.ndarray) -> np.ndarray:
    """Nominal start: the equilibrium plus a seeded perturbation of norm ``run.x0_radius``."""
    radius = float(scenario.section("run").get("x0_radius", 1.0))
    rng = np.random.default_rng(scenario.sub_seed("x0"))
    direction = rng.standard_normal(system.states)
    return x_eq + radius * direction / np.linalg.norm(direction)
