"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class MeshError(ValueError):
    """A mesh is malformed: degenerate cells, open boundary, missing data."""


class IntegrabilityError(RuntimeError):
    """A quadrature failed to converge to the requested accuracy."""


class InsufficientDataError(ValueError):
    """Not enough samples to perform the requested fit or estimate."""


class ResolutionError(RuntimeError):
    """The grid is too coarse to resolve the feature being computed."""


class NonProjectableError(RuntimeError):
    """No positive critical point: the tuple cannot be scaled onto the
    constraint set."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""


class ShapeError(ValueError):
    """Array shapes are inconsistent with the declared number of components."""


class DegeneratePartitionError(RuntimeError):
    """Thresholding produced an empty support for some component."""
