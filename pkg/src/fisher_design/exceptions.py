class FisherDesignError(Exception):
    """Base class for all errors raised by this package."""


class NumericOverflowError(FisherDesignError, ArithmeticError):
    """A simulated state became non-finite."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


class ZeroDiffusionError(FisherDesignError, ZeroDivisionError):
    """Fisher information or likelihood needs an inverse of a zero variance."""

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class DomainError(FisherDesignError, ValueError):
    pass


class NoFixedPointError(FisherDesignError, ValueError):
    pass


class StabilityViolation(FisherDesignError, ValueError):
    """A Markov-chain transition probability fell outside [0, 1]."""

    def __init__(self, message, node=None, dimension=None):
        super().__init__(message)
        self.node = node
        self.dimension = dimension


class SingularInnovationError(FisherDesignError, ArithmeticError):
    pass


class ConfigError(FisherDesignError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PolicyFileError(FisherDesignError, ValueError):
    pass


class BatchFailure(FisherDesignError, RuntimeError):
    pass
