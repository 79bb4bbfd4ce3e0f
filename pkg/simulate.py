import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from errors import DimensionError, DivergenceError
from model import AggregatedSystem
from utils import parallel_map, spawn_generators

logger = logging.getLogger(__name__)

DEFAULT_K1 = 100
DEFAULT_MARGIN = 1.5

Window = Tuple[int, int]


@dataclass(frozen=True)
class Trajectory:
    """States x̄[0..L], outputs y_p[k], y_m[k] and the applied attack a[0..L−1]."""

    states: np.ndarray
    outputs_p: np.ndarray
    outputs_m: np.ndarray
    attack: np.ndarray
    N: int
    n: int
    truncated: bool = False

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def x_part(self) -> np.ndarray:
        """Agent states as an array of shape (L+1, N, n)."""
        return self.states[:, : self.N * self.n].reshape(-1, self.N, self.n)

    def z_part(self) -> np.ndarray:
        return self.states[:, self.N * self.n:].reshape(-1, self.N, self.n)

    def __add__(self, other: "Trajectory") -> "Trajectory":
        steps = min(self.horizon, other.horizon)
        return Trajectory(
            states=self.states[: steps + 1] + other.states[: steps + 1],
            outputs_p=self.outputs_p[: steps + 1] + other.outputs_p[: steps + 1],
            outputs_m=self.outputs_m[: steps + 1] + other.outputs_m[: steps + 1],
            attack=self.attack[:steps] + other.attack[:steps],
            N=self.N,
            n=self.n,
            truncated=self.truncated or other.truncated,
        )


@dataclass(frozen=True)
class DetectorLog:
    energy: float
    alarm: bool
    epsilon: float
    window: Window


def attack_samples(attack, steps: int, n: int) -> np.ndarray:
    """Attack as a (steps, n) array; missing samples are zero, extra ones unused."""
    samples = np.zeros((steps, n))
    if attack is None:
        return samples
    raw = np.asarray(getattr(attack, "samples", attack), dtype=float)
    if raw.ndim == 1:
        raw = raw.reshape(-1, 1) if n == 1 else raw.reshape(1, -1)
    if raw.shape[1] != n:
        raise DimensionError(f"attack samples have {raw.shape[1]} components, the system expects {n}")
    count = min(steps, raw.shape[0])
    samples[:count] = raw[:count]
    return samples


def simulate(
    system: AggregatedSystem,
    x0: np.ndarray,
    attack=None,
    horizon: int = 100,
    include_constant: bool = True,
    include_offset: bool = True,
    truncate: bool = True,
    config: Optional[Config] = None,
) -> Trajectory:
    """Forward recursion of the attacked closed loop.

    With ``truncate`` the run stops as soon as ‖x̄[k]‖ exceeds the divergence
    limit and the trajectory is flagged; otherwise a non-finite state raises
    DivergenceError carrying the first bad step.
    """
    config = config or Config.default()
    if horizon < 1:
        raise DimensionError(f"horizon must be at least 1, got {horizon}")
    x = np.asarray(x0, dtype=float).ravel()
    if x.shape != (system.states,):
        raise DimensionError(f"initial state has length {x.shape[0]}, the system has {system.states} states")

    a = attack_samples(attack, horizon, system.attack_inputs)
    c = system.c if include_constant else np.zeros(system.states)
    A, B = system.A, system.B

    states = np.empty((horizon + 1, system.states))
    states[0] = x
    last = horizon
    truncated = False
    for k in range(horizon):
        x = A @ x + B @ a[k] + c
        if not np.all(np.isfinite(x)):
            if truncate:
                last, truncated = k, True
                break
            raise DivergenceError(f"non-finite state at step {k + 1}", step=k + 1)
        states[k + 1] = x
        if truncate and np.linalg.norm(x) > config.divergence_limit:
            last, truncated = k + 1, True
            break

    states = states[: last + 1]
    if truncated:
        logger.info("Trajectory truncated at step %d (state norm above %.1e)", last, config.divergence_limit)

    offset = system.kappa if include_offset else np.zeros_like(system.kappa)
    return Trajectory(
        states=states,
        outputs_p=states @ system.C_p.T,
        outputs_m=states @ system.C_m.T - offset,
        attack=a[:last],
        N=system.N,
        n=system.n,
        truncated=truncated,
    )


def decompose(
    system: AggregatedSystem,
    x0: np.ndarray,
    attack,
    horizon: int,
    config: Optional[Config] = None,
) -> Tuple[Trajectory, Trajectory]:
    """Split a run into the nominal part (x̄₀, no attack) and the attack response (zero state, no c̄)."""
    nominal = simulate(system, x0, None, horizon, truncate=False, config=config)
    attacked = simulate(
        system,
        np.zeros(system.states),
        attack,
        horizon,
        include_constant=False,
        include_offset=False,
        truncate=False,
        config=config,
    )
    return nominal, attacked


def _validated_window(trajectory: Trajectory, window: Optional[Window]) -> Window:
    start, end = window if window is not None else (1, trajectory.horizon)
    if start > end:
        raise DimensionError(f"detection window [{start}, {end}] is empty")
    if start < 0 or end > trajectory.horizon:
        raise DimensionError(f"detection window [{start}, {end}] lies outside the horizon 0..{trajectory.horizon}")
    return start, end


def detector_energy(trajectory: Trajectory, window: Optional[Window] = None) -> float:
    """Σ‖y_m[k]‖² over the inclusive window (default [1, L])."""
    start, end = _validated_window(trajectory, window)
    return float(np.sum(trajectory.outputs_m[start:end + 1] ** 2))


def performance_energy(trajectory: Trajectory, window: Optional[Window] = None) -> float:
    start, end = _validated_window(trajectory, window)
    return float(np.sum(trajectory.outputs_p[start:end + 1] ** 2))


def alarm(energy: float, epsilon: float) -> bool:
    return energy > epsilon


def detector_log(trajectory: Trajectory, epsilon: float, window: Optional[Window] = None) -> DetectorLog:
    window = _validated_window(trajectory, window)
    energy = detector_energy(trajectory, window)
    return DetectorLog(energy=energy, alarm=alarm(energy, epsilon), epsilon=float(epsilon), window=window)


def consensus_error(trajectory: Trajectory) -> np.ndarray:
    """max over agent pairs of |x_i − x_j| at each step."""
    x = trajectory.x_part()
    spread = x.max(axis=1) - x.min(axis=1)
    return spread.max(axis=1)


def settle_step(system: AggregatedSystem, x0: np.ndarray, config: Optional[Config] = None) -> int:
    """First k with ‖x̄[k+1] − x̄[k]‖ below the step tolerance, capped."""
    config = config or Config.default()
    x = np.asarray(x0, dtype=float).ravel()
    for k in range(config.k1_cap):
        nxt = system.A @ x + system.c
        if np.linalg.norm(nxt - x) < config.convergence_step_tol:
            return max(k, 1)
        x = nxt
    logger.info("Nominal run did not settle within %d steps; using the cap for k1", config.k1_cap)
    return config.k1_cap


def calibrate_kappa(
    system: AggregatedSystem,
    x0: np.ndarray,
    k1: Optional[int] = DEFAULT_K1,
    config: Optional[Config] = None,
) -> np.ndarray:
    """κ = W·Č_m·x̄[k₁] from an unattacked run."""
    if k1 is None:
        k1 = settle_step(system, x0, config)
    if k1 < 1:
        raise DimensionError(f"k1 must be at least 1, got {k1}")
    x = np.asarray(x0, dtype=float).ravel()
    for _ in range(k1):
        x = system.A @ x + system.c
    kappa = system.C_m @ x
    logger.debug("Calibrated kappa at k1=%d: %s", k1, np.array2string(kappa, precision=6))
    return kappa


def random_unit_state(rng: np.random.Generator, dimension: int) -> np.ndarray:
    draw = rng.standard_normal(dimension)
    return draw / np.linalg.norm(draw)


def calibrate_epsilon(
    system: AggregatedSystem,
    trials: int,
    horizon: int,
    margin: float = DEFAULT_MARGIN,
    seed: int = 0,
    initial_states: Optional[Sequence[np.ndarray]] = None,
    workers: int = 1,
    config: Optional[Config] = None,
) -> float:
    """ε = margin × the largest nominal detection energy over [1, L] across the trials.

    Each trial draws its unit-norm x̄₀ from its own spawned generator, so serial
    and threaded runs agree.
    """
    if trials < 1:
        raise DimensionError(f"trials must be at least 1, got {trials}")
    if margin < 1:
        raise DimensionError(f"margin must be at least 1, got {margin}")

    if initial_states is None:
        starts: List[np.ndarray] = [random_unit_state(rng, system.states) for rng in spawn_generators(seed, trials)]
    else:
        starts = [np.asarray(state, dtype=float) for state in initial_states][:trials]

    def trial_energy(x0: np.ndarray) -> float:
        return detector_energy(simulate(system, x0, None, horizon, truncate=False, config=config))

    energies = parallel_map(trial_energy, starts, workers)
    epsilon = margin * max(energies)
    logger.info("Calibrated epsilon=%.6g from %d trials (margin %.3g)", epsilon, len(starts), margin)
    return epsilon


def trajectory_frame(trajectory: Trajectory, epsilon: float) -> pd.DataFrame:
    """Long-format table: one row per (k, agent, coordinate)."""
    steps = trajectory.horizon + 1
    N, n = trajectory.N, trajectory.n
    y_m_sq = np.sum(trajectory.outputs_m ** 2, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(y_m_sq[1:])])

    k_index = np.repeat(np.arange(steps), N * n)
    agent_index = np.tile(np.repeat(np.arange(1, N + 1), n), steps)
    coordinate_index = np.tile(np.arange(1, n + 1), steps * N)
    return pd.DataFrame(
        {
            "k": k_index,
            "agent": agent_index,
            "coordinate": coordinate_index,
            "x": trajectory.x_part().reshape(-1),
            "z": trajectory.z_part().reshape(-1),
            "y_m_norm": np.repeat(np.sqrt(y_m_sq), N * n),
            "y_p_norm": np.repeat(np.linalg.norm(trajectory.outputs_p, axis=1), N * n),
            "alarm": np.repeat(cumulative > epsilon, N * n),
        }
    )
