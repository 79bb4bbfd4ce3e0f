"""Run reports: deterministic JSON, CSV tables and optional SVG plots.

Every file is written to a temporary sibling first and renamed into place, so
a failed command never leaves a partial output behind.
"""

import contextlib
import json
import logging
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, Optional

import numpy as np
import pandas as pd

from config import __version__

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def jsonable(value: Any) -> Any:
    """Plain JSON types; infinities become "UNBOUNDED" and complex numbers {real, imag}."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(key): jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (complex, np.complexfloating)):
        return {"real": jsonable(float(value.real)), "imag": jsonable(float(value.imag))}
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "UNBOUNDED" if value > 0 else "-UNBOUNDED"
        if math.isnan(value):
            return None
        return value
    return value


@dataclass
class RunReport:
    command: str
    config_digest: str
    results: Dict[str, Any]
    seed: Optional[int] = None
    scenario: str = ""
    wall_clock: float = 0.0
    exit_code: int = 0
    tool_version: str = __version__
    outputs: Dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_version": self.tool_version,
            "command": self.command,
            "scenario": self.scenario,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "exit_code": self.exit_code,
            "wall_clock": self.wall_clock,
            "outputs": dict(sorted(self.outputs.items())),
            "results": jsonable(self.results),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"


class Stopwatch:
    def __init__(self) -> None:
        self.started = time.perf_counter()

    def elapsed(self) -> float:
        return round(time.perf_counter() - self.started, 6)


def atomic_write(path: str, text: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temporary = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.remove(temporary)
        raise
    logger.debug("Wrote %s", path)
    return path


@contextlib.contextmanager
def staged_outputs(out_dir: str) -> Iterator[str]:
    """Yield a hidden directory inside ``out_dir`` to write a run's files into.

    The files move into ``out_dir`` only when the block finishes, with
    ``report.json`` last; on any error the staging directory is discarded.
    """
    os.makedirs(out_dir, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".staging-", dir=out_dir)
    try:
        yield staging
        for name in sorted(os.listdir(staging), key=lambda item: (item == "report.json", item)):
            os.replace(os.path.join(staging, name), os.path.join(out_dir, name))
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def write_report(report: RunReport, out_dir: str, name: str = "report.json") -> str:
    return atomic_write(os.path.join(out_dir, name), report.to_json())


def write_csv(frame: pd.DataFrame, path: str) -> str:
    # repr-exact floats keep repeated runs byte-identical.
    return atomic_write(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))


def _savefig(figure, path: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temporary = tempfile.mkstemp(prefix=".tmp-", suffix=".svg", dir=directory)
    os.close(handle)
    try:
        figure.savefig(temporary, format="svg")
        os.replace(temporary, path)
    finally:
        if os.path.exists(temporary):
            os.remove(temporary)
    return path


def plot_trajectory(frame: pd.DataFrame, path: str, epsilon: Optional[float] = None) -> Optional[str]:
    """States of every agent and the detector output norm; skipped when matplotlib is missing."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping %s", path)
        return None

    figure, (top, bottom) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for (agent, coordinate), group in frame.groupby(["agent", "coordinate"]):
        top.plot(group["k"], group["x"], linewidth=0.8, label=f"x{agent}" if coordinate == 1 else None)
    top.set_ylabel("x_i[k]")
    steps = frame.drop_duplicates("k")
    bottom.semilogy(steps["k"], np.maximum(steps["y_m_norm"].to_numpy(), 1e-300), color="black")
    if epsilon:
        bottom.axhline(np.sqrt(epsilon), color="red", linestyle="--", linewidth=0.8)
    bottom.set_ylabel("|y_m[k]|")
    bottom.set_xlabel("k")
    figure.tight_layout()
    try:
        return _savefig(figure, path)
    finally:
        plt.close(figure)


def plot_design(frame: pd.DataFrame, path: str) -> Optional[str]:
    """Bar chart of expected cost per candidate; unbounded candidates are left empty."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping %s", path)
        return None

    costs = frame["expected_cost"].replace([np.inf, -np.inf], np.nan)
    colors = ["tab:green" if winner else "tab:blue" for winner in frame["winner"]]
    figure, axis = plt.subplots(figsize=(8, 4))
    axis.bar(frame["candidate"], costs, color=colors)
    axis.set_ylabel("expected cost")
    axis.set_xlabel("candidate")
    figure.tight_layout()
    try:
        return _savefig(figure, path)
    finally:
        plt.close(figure)


def plot_cost_spread(frame: pd.DataFrame, path: str) -> Optional[str]:
    """Box plot of each candidate's cost over the objective draws; unbounded draws are dropped."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping %s", path)
        return None

    finite = frame[np.isfinite(frame["expected_cost"])]
    labels = list(dict.fromkeys(frame["candidate"]))
    groups = [finite.loc[finite["candidate"] == label, "expected_cost"].to_numpy() for label in labels]
    figure, axis = plt.subplots(figsize=(8, 4))
    axis.boxplot(groups)
    axis.set_xticks(range(1, len(labels) + 1), labels)
    axis.set_ylabel("cost over draws")
    axis.set_xlabel("candidate")
    figure.tight_layout()
    try:
        return _savefig(figure, path)
    finally:
        plt.close(figure)
