"""Exception hierarchy.

Validation failures (bad shapes, out-of-range inputs, malformed files) and
numeric failures (degenerate points, recursion blow-ups, infeasible
optimizations) are kept on separate branches so callers, in particular the
command line layer, can map them to distinct exit codes.
"""


class QuantesError(Exception):
    """Base class for all package errors."""


class ValidationError(QuantesError, ValueError):
    """Malformed or out-of-contract input."""


class NumericError(QuantesError, RuntimeError):
    """A numeric procedure failed or reached an undefined point."""


class DegeneratePointError(NumericError):
    """Density or weight evaluation requested exactly at the location point."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class PathError(NumericError):
    """A recursion produced an invalid value (non-finite, wrong sign, blow-up)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InfeasibleAllocationError(NumericError):
    """The allocator could not satisfy its constraints to tolerance."""

    def __init__(self, message, weights=None, residual=None):
        super().__init__(message)
        self.weights = weights
        self.residual = residual
