class GtGuardError(Exception):
    """Base class for every error raised by gtguard."""


class ConfigError(GtGuardError):
    """Invalid scenario file, settings value or command option."""

    def __init__(self, message: str, field: str = "", line: int = 0) -> None:
        self.field = field
        self.line = line
        location = ""
        if line:
            location += f"line {line}"
        if field:
            location += (", " if location else "") + f"field '{field}'"
        super().__init__(f"{location}: {message}" if location else message)


class NetworkError(GtGuardError):
    """Disconnected graph, bad edge or inadmissible consensus scaling."""


class DimensionError(GtGuardError):
    pass


class SingularObjectiveError(GtGuardError):
    """The aggregated Hessian is singular, so the optimum is not unique."""


class DivergenceError(GtGuardError):
    def __init__(self, message: str, step: int) -> None:
        self.step = step
        super().__init__(message)


class ZeroComputationError(GtGuardError):
    pass


class AttackSynthesisError(GtGuardError):
    pass


class AugmentationError(GtGuardError):
    pass


class SolverError(GtGuardError):
    def __init__(self, message: str, status: str = "") -> None:
        self.status = status
        super().__init__(message)


class OracleSizeError(GtGuardError):
    pass


class DesignError(GtGuardError):
    pass


class SosError(GtGuardError):
    pass
