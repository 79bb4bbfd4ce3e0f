import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

import yaml


__version__ = "0.4.0"

logger = logging.getLogger(__name__)

ENV_PREFIX = "GTGUARD_"
SETTINGS_FILENAME = "settings.yaml"


@dataclass(frozen=True)
class Config:
    """Tolerances and solver preferences shared by every analysis step."""

    rank_tol: float = 1e-9
    symmetry_tol: float = 1e-12
    zero_agreement_tol: float = 1e-6
    marginal_band: float = 1e-6
    pencil_residual_tol: float = 1e-7
    normal_rank_samples: int = 5
    square_down_draws: int = 3
    lmi_margin: float = 1e-8
    sdp_residual_tol: float = 1e-6
    cyclo_p_bound: float = 1e8
    divergence_limit: float = 1e12
    convergence_step_tol: float = 1e-8
    k1_cap: int = 10_000
    oracle_max_columns: int = 4000
    sdp_solvers: Tuple[str, ...] = ("CLARABEL", "SCS")
    solver_verbose: bool = False

    # (minimum, maximum) clamps applied to numeric settings, mirroring how the
    # settings file is sanitised.
    _LIMITS = {
        "rank_tol": (0.0, 1e-2),
        "symmetry_tol": (0.0, 1e-3),
        "zero_agreement_tol": (0.0, 1e-1),
        "marginal_band": (0.0, 1e-1),
        "pencil_residual_tol": (0.0, 1e-1),
        "normal_rank_samples": (5, 100),
        "square_down_draws": (3, 50),
        "lmi_margin": (0.0, 1e-2),
        "sdp_residual_tol": (1e-12, 1e-1),
        "cyclo_p_bound": (1.0, 1e12),
        "divergence_limit": (1.0, 1e300),
        "convergence_step_tol": (0.0, 1.0),
        "k1_cap": (1, 10_000_000),
        "oracle_max_columns": (1, 100_000),
    }

    @classmethod
    def default(cls) -> "Config":
        return cls()

    @classmethod
    def load(cls, settings_path: Optional[str] = None, environ: Optional[Dict[str, str]] = None) -> "Config":
        """Build a Config from defaults, an optional settings file and environment overrides."""
        values: Dict[str, Any] = {}
        path = settings_path or os.path.join(os.getcwd(), SETTINGS_FILENAME)
        values.update(cls._read_settings_file(path, explicit=settings_path is not None))
        values.update(cls._read_environment(os.environ if environ is None else environ))
        config = cls()
        for name, raw in values.items():
            config = config._with_value(name, raw)
        return config

    def replace(self, **changes: Any) -> "Config":
        return replace(self, **changes)

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def _read_settings_file(path: str, explicit: bool) -> Dict[str, Any]:
        if not os.path.exists(path):
            if explicit:
                logger.warning("Settings file not found at: %s; using defaults.", path)
            return {}

        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except Exception as exc:
            logger.warning("Failed to read settings file %s: %s", path, exc)
            return {}

        if not isinstance(data, dict):
            logger.warning("Settings file %s is invalid (root must be a mapping).", path)
            return {}
        section = data.get("tolerances", data)
        if not isinstance(section, dict):
            return {}
        logger.debug("Settings loaded from %s", path)
        return dict(section)

    @staticmethod
    def _read_environment(environ: Dict[str, str]) -> Dict[str, Any]:
        names = {f.name for f in fields(Config)}
        found: Dict[str, Any] = {}
        for key, value in environ.items():
            if not key.startswith(ENV_PREFIX):
                continue
            name = key[len(ENV_PREFIX):].lower()
            if name in names:
                found[name] = value
        return found

    def _with_value(self, name: str, raw: Any) -> "Config":
        if name not in {f.name for f in fields(self)}:
            logger.warning("Unknown tolerance setting '%s' ignored.", name)
            return self

        current = getattr(self, name)
        if isinstance(current, bool):
            value: Any = self._read_bool(name, raw, current)
        elif isinstance(current, int):
            value = self._read_int(name, raw, current)
        elif isinstance(current, float):
            value = self._read_float(name, raw, current)
        else:
            value = self._read_solvers(name, raw, current)
        return replace(self, **{name: value})

    def _read_float(self, name: str, raw: Any, default: float) -> float:
        try:
            numeric = float(raw)
        except (TypeError, ValueError):
            logger.warning("Invalid value for %s; falling back to %s.", name, default)
            return default
        minimum, maximum = self._LIMITS.get(name, (None, None))
        if minimum is not None:
            numeric = max(minimum, numeric)
        if maximum is not None:
            numeric = min(maximum, numeric)
        return numeric

    def _read_int(self, name: str, raw: Any, default: int) -> int:
        try:
            numeric = int(float(raw))
        except (TypeError, ValueError):
            logger.warning("Invalid value for %s; falling back to %s.", name, default)
            return default
        minimum, maximum = self._LIMITS.get(name, (None, None))
        if minimum is not None:
            numeric = max(int(minimum), numeric)
        if maximum is not None:
            numeric = min(int(maximum), numeric)
        return numeric

    @staticmethod
    def _read_bool(name: str, raw: Any, default: bool) -> bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        logger.warning("Invalid value for %s; falling back to %s.", name, default)
        return default

    @staticmethod
    def _read_solvers(name: str, raw: Any, default: Tuple[str, ...]) -> Tuple[str, ...]:
        if isinstance(raw, str):
            items = [part.strip() for part in raw.split(",")]
        elif isinstance(raw, (list, tuple)):
            items = [str(part).strip() for part in raw]
        else:
            logger.warning("Invalid value for %s; falling back to %s.", name, default)
            return default
        solvers = tuple(item.upper() for item in items if item)
        return solvers or default
