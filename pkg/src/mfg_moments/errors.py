"""Exception taxonomy shared across the package.

Validation problems (bad configuration documents, violated invariants) raise
:class:`ScenarioError`.  Failures of the numerics themselves (singular
linearizer, non-convergent quadrature or iteration, under-resolved grids)
raise subclasses of :class:`NumericsError` so callers can distinguish the
two families, e.g. for process exit codes.
"""


class ScenarioError(ValueError):
    """A configuration document or scenario invariant is invalid."""


class NumericsError(RuntimeError):
    """Base class for numerical failures."""


class SingularityError(NumericsError):
    """An operation was requested at or across a focal (singular) time."""


class ConvergenceError(NumericsError):
    """An iteration or adaptive quadrature failed to converge."""


class GridResolutionError(NumericsError):
    """A grid is too coarse to resolve the requested feature."""


class FormulaValidationError(NumericsError):
    """A closed-form expression failed its residual validation."""
