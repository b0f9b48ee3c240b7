"""Exception hierarchy shared across the package."""


class MjflError(Exception):
    """Base class for all errors raised by mjfl."""


class InvariantViolation(MjflError, ValueError):
    """A domain value broke one of its structural invariants."""


class IncompleteRoundError(MjflError):
    """A round is missing the time sample of a scheduled device."""


class UnreachableTargetError(MjflError, ValueError):
    """The requested loss lies at or below the curve's asymptote."""


class NumericalError(MjflError, ArithmeticError):
    """Factorization failure or non-finite values in a numerical routine."""


class SchedulerContractError(MjflError):
    """A scheduler returned a plan of the wrong size or with unavailable devices."""


class ConfigError(MjflError, ValueError):
    """Invalid experiment configuration.

    Attributes:
        key: Dotted path of the offending key, when known.
    """

    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}" if key else reason)
