"""Exception hierarchy shared across the toolkit.

Every class carries a process exit code so the CLI can map failures to
machine-readable error classes.
"""


class NfeError(Exception):
    """Base class for toolkit failures."""

    exit_code = 1


class ConfigError(NfeError):
    """Invalid plan, spec, or hyperparameter combination."""

    exit_code = 2


class DataError(NfeError):
    """Dataset missing, corrupt, or unfetchable."""

    exit_code = 3


class TrainingDivergedError(NfeError):
    """Loss became non-finite during optimization."""

    exit_code = 4


class DeadExitError(ConfigError):
    """An exit path crosses a stage whose group mask has no surviving weights."""

    exit_code = 5
