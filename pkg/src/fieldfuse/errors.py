"""Exception hierarchy for fieldfuse.

Argument-level mistakes (wrong shapes, out-of-range parameters) raise the
builtin ``ValueError``; the classes below mark failures of the data or of
the numerics themselves.
"""


class FieldFuseError(Exception):
    """Base class for all fieldfuse-specific errors."""


class GeometryError(FieldFuseError):
    """Raised when a surface description is open, self-intersecting or
    otherwise unusable."""


class OperatorError(FieldFuseError):
    """Raised when an output operator is rank deficient or degenerate."""


class DataError(FieldFuseError):
    """Raised when field data is too incomplete or inconsistent to process."""


class NumericalError(FieldFuseError):
    """Raised when a factorization or solve fails or loses accuracy."""


class ConstraintInfeasibleError(FieldFuseError):
    """Raised when equality constraints cannot be satisfied in the current
    basis (rank deficiency of the constraint block)."""
