import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config, __version__
from design import optimal_edge, optimal_monitor, randomized_edge_sweep
from errors import AttackSynthesisError, ConfigError
from metric import metric_for_scenario, replay_certificate
from model import AggregatedSystem, equilibrium
from report import RunReport, Stopwatch, plot_cost_spread, plot_design, plot_trajectory, staged_outputs, write_csv, write_report
from scenario import ScenarioConfig, initial_state
from simulate import (
    DEFAULT_K1,
    DEFAULT_MARGIN,
    calibrate_epsilon,
    calibrate_kappa,
    consensus_error,
    detector_energy,
    detector_log,
    performance_energy,
    random_unit_state,
    simulate,
    trajectory_frame,
)
from sos import build_poly_system, replay_sos_certificate, sos_report, sos_security_bound
from utils import safe_execute, spawn_generators
from zeros import (
    AttackSignal,
    classify,
    custom_attack,
    invariant_zeros,
    relative_degree,
    synthesize_rd_attack,
    synthesize_zda,
    unstable_zeros,
    verdict_report,
)

logger = logging.getLogger("gtguard")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ALARM = 2

Artifact = Callable[[str], Optional[str]]


@dataclass
class Context:
    scenario: ScenarioConfig
    config: Config
    out_dir: str
    plot: bool = False
    workers: int = 1
    artifacts: Dict[str, Artifact] = field(default_factory=dict)


# --- shared steps -------------------------------------------------------------


def prepare_detector(ctx: Context, system: AggregatedSystem, force: bool = False) -> Tuple[AggregatedSystem, np.ndarray, Dict[str, Any]]:
    """Attach κ and ε to the system and return the nominal start used for the run."""
    scenario = ctx.scenario
    detector = scenario.section("detector")
    x_eq = equilibrium(system)
    x0 = initial_state(scenario, system, x_eq)

    kappa_setting = "calibrate" if force else detector.get("kappa", "equilibrium")
    k1 = None
    if kappa_setting == "equilibrium":
        kappa = system.C_m @ x_eq
    elif kappa_setting == "calibrate":
        raw_k1 = detector.get("kappa_k1", DEFAULT_K1)
        k1 = None if raw_k1 == "auto" else int(raw_k1)
        kappa = calibrate_kappa(system, x0, k1, ctx.config)
    else:
        kappa = np.asarray(kappa_setting, dtype=float)
        kappa_setting = "explicit"
    system = system.with_detector(kappa=kappa)

    epsilon = None if force else scenario.epsilon
    epsilon_source = "fixed"
    if epsilon is None:
        trials = max(1, int(detector.get("trials", 20)))
        radius = float(scenario.section("run").get("x0_radius", 1.0))
        starts = [x0] + [
            x_eq + radius * random_unit_state(rng, system.states)
            for rng in spawn_generators(scenario.sub_seed("calibration"), trials - 1)
        ]
        epsilon = calibrate_epsilon(
            system,
            len(starts),
            scenario.horizon,
            margin=float(detector.get("margin", DEFAULT_MARGIN)),
            initial_states=starts,
            workers=ctx.workers,
            config=ctx.config,
        )
        epsilon_source = "calibrated"
    system = system.with_detector(epsilon=epsilon)
    block = {
        "epsilon": epsilon,
        "epsilon_source": epsilon_source,
        "kappa": kappa,
        "kappa_source": kappa_setting,
        "kappa_k1": k1,
    }
    return system, x0, block


def scenario_epsilon(ctx: Context) -> float:
    epsilon = ctx.scenario.epsilon
    if epsilon is None:
        _, _, block = prepare_detector(ctx, ctx.scenario.system(ctx.config))
        epsilon = block["epsilon"]
    return epsilon


def build_attack(ctx: Context, system: AggregatedSystem) -> Tuple[Optional[AttackSignal], np.ndarray, Dict[str, Any]]:
    """Attack signal, the initial state it needs and a description for the report."""
    scenario, config = ctx.scenario, ctx.config
    section = scenario.section("attack")
    kind = section.get("kind", "none")
    horizon = scenario.horizon
    rest = np.zeros(system.states)

    if kind == "none":
        return None, rest, {"kind": "none"}
    if kind == "custom":
        return custom_attack(section["samples"], system.attack_inputs), rest, {"kind": "custom"}
    if kind == "rd":
        delta_m = relative_degree(system.monitor_triple(), tol=config.rank_tol)
        beta = float(section.get("beta", 1.0))
        signal = synthesize_rd_attack(horizon, delta_m, beta, system.attack_inputs)
        return signal, rest, {"kind": "rd", "delta_m": delta_m, "beta": beta}

    zeros = invariant_zeros(system.monitor_triple(), seed=scenario.sub_seed("zeros"), config=config)
    candidates = [zero for zero in unstable_zeros(zeros, config) if not zero.decoupling]
    if not candidates:
        raise AttackSynthesisError("the monitor channel has no unstable invariant zero; no zero-dynamics attack exists")
    zero = candidates[0]
    signal, x_attack = synthesize_zda(zero, float(section.get("scale", 1.0)), horizon)

    start = section.get("initial_state", "exact")
    if start == "perturbed":
        rng = np.random.default_rng(scenario.sub_seed("perturbation"))
        x_attack = x_attack + float(section.get("perturbation", 1e-3)) * random_unit_state(rng, system.states)
    elif start == "nominal":
        x_attack = rest
    return signal, x_attack, {"kind": "zda", "zero": zero.as_dict(), "initial_state": start}


# --- commands -----------------------------------------------------------------


def cmd_simulate(ctx: Context) -> Tuple[Dict[str, Any], int]:
    scenario, config = ctx.scenario, ctx.config
    system, x0, detector = prepare_detector(ctx, scenario.system(config))
    attack, x_attack, attack_info = build_attack(ctx, system)

    # Nominal run plus the attack response from its own initial state.
    nominal = simulate(system, x0, None, scenario.horizon, config=config)
    attacked = simulate(
        system, x_attack, attack, scenario.horizon, include_constant=False, include_offset=False, config=config
    )
    total = nominal + attacked
    log = detector_log(total, system.epsilon)
    errors = consensus_error(total)

    results = {
        "detector": detector,
        "attack": attack_info,
        "horizon": total.horizon,
        "truncated": total.truncated,
        "detector_energy": log.energy,
        "attack_detector_energy": detector_energy(attacked) if attacked.horizon else 0.0,
        "performance_energy": performance_energy(total) if total.horizon else 0.0,
        "alarm": log.alarm,
        "max_consensus_error": float(np.max(errors)),
        "final_consensus_error": float(errors[-1]),
        "nominal_final_consensus_error": float(consensus_error(nominal)[-1]),
    }
    frame = trajectory_frame(total, system.epsilon)
    ctx.artifacts["trajectory.csv"] = lambda path: write_csv(frame, path)
    if ctx.plot:
        ctx.artifacts["trajectory.svg"] = lambda path: plot_trajectory(frame, path, system.epsilon)
    if log.alarm:
        logger.info("Alarm raised: detector energy %.6g above epsilon %.6g", log.energy, system.epsilon)
    return results, EXIT_ALARM if log.alarm else EXIT_OK


def cmd_analyze(ctx: Context) -> Tuple[Dict[str, Any], int]:
    system = ctx.scenario.system(ctx.config)
    verdict = classify(
        system.monitor_triple(), system.performance_triple(), seed=ctx.scenario.sub_seed("zeros"), config=ctx.config
    )
    return {"verdict": verdict_report(verdict)}, EXIT_OK


def cmd_metric(ctx: Context) -> Tuple[Dict[str, Any], int]:
    scenario = ctx.scenario
    result = metric_for_scenario(
        scenario.network(),
        scenario.objectives(),
        scenario.alpha,
        scenario.attack_node,
        scenario.monitor_node,
        scenario.w,
        scenario_epsilon(ctx),
        mode=scenario.mode,
        oracle_horizons=scenario.oracle_horizons,
        seed=scenario.sub_seed("zeros"),
        config=ctx.config,
        attack_channels=scenario.attack_channels,
    )
    results: Dict[str, Any] = {"metric": result.as_dict()}
    if scenario.section("run").get("replay") and not result.unbounded:
        replay = replay_certificate(result, seed=scenario.sub_seed("replay"))
        results["replay"] = asdict(replay)
    return results, EXIT_OK


def _design_artifacts(ctx: Context, report) -> None:
    frame = report.frame()
    ctx.artifacts["design.csv"] = lambda path: write_csv(frame, path)
    if ctx.plot:
        ctx.artifacts["design.svg"] = lambda path: plot_design(frame, path)


def cmd_design_monitor(ctx: Context) -> Tuple[Dict[str, Any], int]:
    scenario = ctx.scenario
    report = optimal_monitor(
        scenario.network(),
        scenario.objectives(),
        scenario.alpha,
        scenario.w,
        scenario_epsilon(ctx),
        scenario.belief(),
        candidates=scenario.monitor_candidates(),
        mode=scenario.mode,
        belief_scale=scenario.belief_scale,
        seed=scenario.sub_seed("zeros"),
        workers=ctx.workers,
        config=ctx.config,
        attack_channels=scenario.attack_channels,
    )
    _design_artifacts(ctx, report)
    return {"design": report.as_dict()}, EXIT_OK


def cmd_design_edge(ctx: Context) -> Tuple[Dict[str, Any], int]:
    scenario = ctx.scenario
    options = dict(
        mode=scenario.edge_mode,
        edge_weight=scenario.edge_weight,
        metric_mode=scenario.mode,
        seed=scenario.sub_seed("zeros"),
        workers=ctx.workers,
        config=ctx.config,
        attack_channels=scenario.attack_channels,
    )
    fixed = (scenario.alpha, scenario.monitor_node, scenario.w, scenario_epsilon(ctx), scenario.belief())
    if scenario.draws > 1:
        if not scenario.has_random_objectives:
            raise ConfigError("design.draws needs randomized objectives, not explicit ones", field="design.draws")
        sweep = randomized_edge_sweep(
            scenario.network(), scenario.objectives, scenario.draws, *fixed, scenario.edge_candidates(), **options
        )
        frame = sweep.frame()
        ctx.artifacts["design.csv"] = lambda path: write_csv(frame, path)
        if ctx.plot:
            ctx.artifacts["design.svg"] = lambda path: plot_cost_spread(frame, path)
        return {"design": sweep.as_dict()}, EXIT_OK

    report = optimal_edge(scenario.network(), scenario.objectives(), *fixed, scenario.edge_candidates(), **options)
    _design_artifacts(ctx, report)
    return {"design": report.as_dict()}, EXIT_OK


def cmd_sos(ctx: Context) -> Tuple[Dict[str, Any], int]:
    scenario = ctx.scenario
    epsilon = scenario.epsilon
    if epsilon is None:
        raise ConfigError("the sos command needs a numeric detector.epsilon", field="detector.epsilon")
    section = scenario.section("sos")
    psys = build_poly_system(
        scenario.poly_objectives(),
        scenario.network(),
        scenario.alpha,
        scenario.attack_node,
        scenario.monitor_node,
        scenario.w,
        config=ctx.config,
    )
    region = section.get("region_radius")
    bound, certificate = sos_security_bound(
        psys,
        epsilon,
        basis_degree=section.get("basis_degree"),
        region_radius=None if region is None else float(region),
        include_attack=bool(section.get("include_attack", False)),
        config=ctx.config,
    )
    results: Dict[str, Any] = {"sos": sos_report(bound, certificate)}
    if scenario.section("run").get("replay"):
        radius = 0.5 if region is None else min(0.5, float(region))
        replay = replay_sos_certificate(psys, certificate, radius=radius, seed=scenario.sub_seed("replay"))
        results["replay"] = asdict(replay)
    return results, EXIT_OK


def cmd_calibrate(ctx: Context) -> Tuple[Dict[str, Any], int]:
    _, _, detector = prepare_detector(ctx, ctx.scenario.system(ctx.config), force=True)
    return {"detector": detector}, EXIT_OK


COMMANDS: Dict[str, Callable[[Context], Tuple[Dict[str, Any], int]]] = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "metric": cmd_metric,
    "design-monitor": cmd_design_monitor,
    "design-edge": cmd_design_edge,
    "sos": cmd_sos,
    "calibrate": cmd_calibrate,
}


# --- command line -------------------------------------------------------------


def _horizon_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got '{text}'") from None
    if not values or any(value < 1 for value in values):
        raise argparse.ArgumentTypeError(f"horizons must be positive integers, got '{text}'")
    return values


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to EXIT_ERROR; 2 is reserved for alarms."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="gtguard",
        description="Security analysis and hardening of gradient-tracking networks against stealthy attacks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="scenario YAML file")
    parser.add_argument("--seed", type=int, help="master seed (overrides the scenario)")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--horizon", type=int, help="simulation / calibration horizon L")
    parser.add_argument("--oracle-L", type=_horizon_list, help="finite-horizon oracle lengths, e.g. 5,10,20")
    parser.add_argument("--mode", choices=["psd", "cyclo", "auto"], help="dissipation SDP mode")
    parser.add_argument("--draws", type=int, help="objective draws for a randomized design-edge sweep")
    parser.add_argument("--plot", action="store_true", help="also write SVG plots")
    parser.add_argument("--workers", type=int, default=1, help="threads for sweeps and calibration")
    parser.add_argument("--settings", help="tolerance settings file (default: ./settings.yaml if present)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def run(args: argparse.Namespace, config: Config) -> int:
    scenario = ScenarioConfig.load(args.config).with_overrides(
        seed=args.seed, horizon=args.horizon, oracle_L=args.oracle_L, mode=args.mode, draws=args.draws
    )
    ctx = Context(scenario=scenario, config=config, out_dir=args.out, plot=args.plot, workers=max(1, args.workers))
    watch = Stopwatch()
    logger.info("Running %s on %s (seed %s)", args.command, scenario.name, scenario.seed)
    results, code = COMMANDS[args.command](ctx)

    report = RunReport(
        command=args.command,
        config_digest=scenario.digest(),
        results=results,
        seed=scenario.seed,
        scenario=scenario.name,
        exit_code=code,
    )
    with staged_outputs(ctx.out_dir) as staging:
        for name, writer in ctx.artifacts.items():
            if writer(os.path.join(staging, name)):
                report.outputs[name] = name
        report.outputs["report.json"] = "report.json"
        report.wall_clock = watch.elapsed()
        write_report(report, staging)
    logger.info("Report written to %s", os.path.join(ctx.out_dir, "report.json"))
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    config = Config.load(args.settings)
    outcome = safe_execute(run, f"{args.command} failed", args, config)
    return EXIT_ERROR if outcome is None else outcome


if __name__ == "__main__":
    sys.exit(main())
