"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InvalidHyperparameterError(ValueError):
    """A hyperparameter is outside its valid range (e.g. a non-positive temperature)."""


class ConfigError(ValueError):
    """A configuration is malformed or inconsistent."""


class TaskIdError(IndexError):
    """A task id is outside [0, num_tasks)."""


class SelectionError(LookupError):
    """A requested layer or matrix carries no adapter."""


class ProbeError(ValueError):
    """The probe input is degenerate (e.g. only one task present)."""


class CorrectnessGateError(RuntimeError):
    """A benchmarked path disagrees with its reference computation."""
