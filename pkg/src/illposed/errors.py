"""Exception types shared across the package."""


class DomainError(ValueError):
    """Evaluation point lies outside a basis domain."""


class BasisMismatchError(ValueError):
    """Operands live on incompatible bases."""


class ConfigError(ValueError):
    """Invalid user-supplied configuration."""


class NumericalError(ArithmeticError):
    """A numerical contract could not be met."""


class DegenerateDesignError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    pass


class NonConvexError(NumericalError):
    """Empirical objective is not strictly convex at the requested lambda."""

    def __init__(self, message: str, min_eig: float):
        super().__init__(message)
        self.min_eig = min_eig


class IdentificationError(NumericalError):
    pass


class SourceConditionError(NumericalError):
    def __init__(self, message: str, component: int):
        super().__init__(message)
        self.component = component
