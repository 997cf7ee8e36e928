"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class DegeneratePosterior(ArithmeticError):
    """All posterior mass vanished numerically; no normalization possible."""


class ObjectiveEvaluationError(ArithmeticError):
    """A non-finite intermediate appeared while evaluating an objective term."""


class TrainingDivergence(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class InitializationError(RuntimeError):
    """Mixture initialization could not produce K nonempty clusters."""


class CheckpointError(IOError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class DataFormatError(ValueError):
    """A dataset file is malformed or internally inconsistent."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""
