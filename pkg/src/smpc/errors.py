"""Exception types shared across the package."""


class SmpcError(Exception):
    """Base class for all package-specific errors."""


class NotStableError(SmpcError):
    """Closed-loop matrix has spectral radius at or above one."""


class NotSPDError(SmpcError):
    """Matrix expected to be symmetric positive definite is not."""


class DomainError(SmpcError):
    """Scalar argument outside its mathematical domain."""


class EmptySetError(SmpcError):
    """A set operation produced (or received) an empty set."""


class NoConvergenceError(SmpcError):
    """Fixed-point iteration exhausted its iteration budget."""


class DimensionMismatchError(SmpcError):
    """Array shapes are inconsistent with each other."""


class EmptyTighteningError(SmpcError):
    """Constraint tightening emptied a constraint set.

    Carries the name of the offending constraint so callers can report
    which chance-constraint target is unachievable.
    """

    def __init__(self, constraint: str, message: str = ""):
        self.constraint = constraint
        super().__init__(message or f"tightening emptied constraint {constraint!r}")


class BothInfeasibleError(SmpcError):
    """Both binary-reset variants of the tree optimization are infeasible."""


class SolverFaultError(SmpcError):
    """Closed-loop controller hit an unrecoverable solver failure."""


class ParseError(SmpcError):
    """Configuration file could not be parsed; message carries location."""


class ValidationError(SmpcError):
    """Configuration parsed but violates an invariant; message names it."""
