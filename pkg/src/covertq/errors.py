"""Exception types shared across the package."""


class CovertQError(Exception):
    """Base class for all covertq errors."""


class DomainError(CovertQError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UnsupportedCombinationError(CovertQError, ValueError):
    """The requested quantity is not defined for this distribution pair."""


class StabilityError(CovertQError, ValueError):
    """A configuration violates a queue stability condition."""


class SingularPointError(CovertQError, ValueError):
    """A density ratio was requested at a point where the denominator vanishes
    and no analytic limit is available."""


class MalformedTraceError(CovertQError, ValueError):
    """An arrival/departure trace violates ordering constraints."""


class RunawayError(CovertQError, RuntimeError):
    """The simulated backlog exceeded the runaway guard; the configuration is
    almost certainly unstable."""


class InvalidInputError(CovertQError, ValueError):
    """A non-finite or otherwise unusable value was passed to a detector."""


class NumericError(CovertQError, RuntimeError):
    """A quadrature failed to converge; carries diagnostics in args."""
