"""Exception types shared across the package."""


class BilevelFlowError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(BilevelFlowError):
    """An SPD factorization failed; usually means strong convexity was lost."""


class SingularHessian(BilevelFlowError):
    """A Newton system was numerically singular."""


class NonConvergence(BilevelFlowError):
    """An iterative solve did not reach its tolerance within its budget."""


class DegenerateConstraint(BilevelFlowError):
    """The scalar filter's constraint normal vanished away from the manifold.

    Under strong convexity of the lower level this cannot happen, so it is
    surfaced as an error rather than silently disabling the filter.
    """


class MissingConstant(BilevelFlowError):
    """A required regularity constant is absent from the problem record."""

    def __init__(self, symbol: str):
        super().__init__(f"problem constants record is missing {symbol!r}")
        self.symbol = symbol


class ConfigError(BilevelFlowError):
    """An experiment configuration failed validation."""
