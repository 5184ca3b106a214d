"""Exception taxonomy shared by every module.

Exit-code mapping used by the CLI lives in cli.py; library code raises these
and never calls sys.exit.
"""


class DkdError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(DkdError, ValueError):
    """An argument violates an operation's precondition (bad shape, range, kind)."""


class PreconditionError(DkdError, RuntimeError):
    """Required state is missing (e.g. a parameter without a gradient)."""


class UndefinedMetricError(DkdError, ArithmeticError):
    """A metric is mathematically undefined for the given inputs."""


class NumericError(DkdError, FloatingPointError):
    """A non-finite value appeared where the pipeline requires finite numbers."""


class DataFormatError(DkdError, OSError):
    """A dataset / parameter / config file is malformed or unreadable."""
