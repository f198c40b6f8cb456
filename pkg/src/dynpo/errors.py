"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DynPOError(Exception):
    exit_code = 1


class ParameterError(DynPOError, ValueError):
    exit_code = 2


class IngestionError(DynPOError, ValueError):
    exit_code = 2


class DomainError(DynPOError, ValueError):
    exit_code = 2


class ConfigError(DynPOError, ValueError):
    exit_code = 2


class ShapeError(DynPOError, ValueError):
    exit_code = 2


class InfeasibleError(DynPOError):
    """Premia bounds cannot cover the required base offsets."""

    exit_code = 3

    def __init__(self, message, agents=()):
        super().__init__(message)
        self.agents = tuple(agents)


class UnsupportedError(DynPOError):
    exit_code = 4


class OracleBoundError(DynPOError):
    exit_code = 5

    def __init__(self, message, size=None):
        super().__init__(message)
        self.size = size
