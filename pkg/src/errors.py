"""Exception hierarchy shared by the simulator modules and mapped to CLI exit codes in main.py."""

from typing import Iterable, List, Tuple


class FedGanError(Exception):
    """Base class for every error raised on purpose by this package."""


class ShapeError(FedGanError, ValueError):
    """Tensor or parameter shapes do not line up."""


class UnboundInputError(FedGanError, KeyError):
    """A graph root was evaluated without a binding."""


class NonFiniteError(FedGanError, ValueError):
    """NaN or Inf found where finite values are required."""


class DivergenceError(FedGanError, ArithmeticError):
    """A local training step produced non-finite gradients or losses."""


class ConfigError(FedGanError, ValueError):
    """
    Configuration failed schema validation or a cross-field invariant.

    ``problems`` holds (field path, message) pairs, e.g. ("detection.decay", "must be in (0, 1)").
    """

    def __init__(self, problems: Iterable[Tuple[str, str]]):
        self.problems: List[Tuple[str, str]] = list(problems)
        lines = [f"{path or '<root>'}: {msg}" for path, msg in self.problems]
        super().__init__("Invalid configuration:\n  " + "\n  ".join(lines))


class ConfigFileMissingError(FedGanError, FileNotFoundError):
    """The configuration (or assertions) file does not exist."""


class IncomparableRunsError(FedGanError):
    """Runs passed to compare were produced from different dataset seeds."""


class RunFailedError(FedGanError):
    """A scenario run aborted; its directory holds a FAILED marker."""
