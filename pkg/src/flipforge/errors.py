"""Exception hierarchy shared by all flipforge modules."""


class FlipforgeError(Exception):
    pass


class DomainError(FlipforgeError, ValueError):
    """Argument outside the domain where an operation is defined."""


class RangeError(FlipforgeError, ValueError):
    pass


class BudgetError(FlipforgeError):
    """Iteration budget exhausted before the requested accuracy was reached.

    ``best`` carries the best result obtained so far (may be None).
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class InconsistencyError(FlipforgeError):
    pass


class CertificateError(FlipforgeError):
    pass


class CapacityError(FlipforgeError):
    def __init__(self, message, required_depth=None):
        super().__init__(message)
        self.required_depth = required_depth


class ConditioningError(FlipforgeError):
    pass


class StencilError(FlipforgeError):
    pass


class BoundError(FlipforgeError):
    pass


class ValidationError(FlipforgeError):
    pass


class PackingError(FlipforgeError):
    pass


class GeometryError(FlipforgeError):
    pass


class DegenerateModulusError(FlipforgeError):
    pass
