"""Exception hierarchy shared by all modules."""


class RxError(Exception):
    """Base class for every error raised by rxdpm."""


class InvalidArgument(RxError, ValueError):
    pass


class NumericalFailure(RxError, ArithmeticError):
    pass


class DegenerateExtrapolation(RxError, ArithmeticError):
    """The extrapolation denominator ``1 - sum(lambda**p)`` is (near) zero."""


class PreconditionViolation(RxError):
    pass


class UnsupportedOperation(RxError, NotImplementedError):
    pass


class ConfigError(InvalidArgument):
    """Experiment config failed validation; ``path`` names the offending key."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
