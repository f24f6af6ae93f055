"""Exception hierarchy. Each class carries the CLI exit status it maps to."""


class QPError(Exception):
    exit_code = 1


class ConfigError(QPError, ValueError):
    exit_code = 2


class DomainError(QPError, ValueError):
    """Input outside the domain of an operation (bad site, wrong lattice, ...)."""

    exit_code = 2


class ResonanceError(QPError):
    exit_code = 3

    def __init__(self, message, k=None, l=None, divisor=None, predicted=None):
        super().__init__(message)
        self.k = k
        self.l = l
        self.divisor = divisor
        self.predicted = predicted


class RegimeError(ResonanceError):
    pass


class ResourceError(QPError):
    exit_code = 4


class InvariantError(QPError):
    exit_code = 5


class ContractError(InvariantError):
    pass


class ConvergenceError(InvariantError):
    def __init__(self, message, ratio=None):
        super().__init__(message)
        self.ratio = ratio
