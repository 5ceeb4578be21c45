"""Exception hierarchy shared across the package."""


class LdcbfError(Exception):
    """Base class for all library errors."""


class NumericalError(LdcbfError):
    """A computation produced a non-finite value.

    ``index`` is the offending vector entry or integration step.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class Infeasible(LdcbfError):
    pass


class Unbounded(LdcbfError):
    pass


class MaxIterations(LdcbfError):
    pass


class EmptyPool(LdcbfError):
    pass


class EmptyInitialSet(LdcbfError):
    pass


class DegenerateLhat(LdcbfError):
    pass


class MismatchedConstants(LdcbfError):
    pass


class DuplicatePoints(LdcbfError):
    pass


class ConfigError(LdcbfError):
    pass


class DivergenceError(LdcbfError):
    pass
