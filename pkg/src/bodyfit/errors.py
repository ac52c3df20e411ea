"""Exception types raised by bodyfit."""


class BodyFitError(Exception):
    """Base class for all bodyfit errors."""


class DimensionMismatch(BodyFitError, ValueError):
    pass


class MalformedTree(BodyFitError, ValueError):
    pass


class InfeasiblePoint(BodyFitError):
    """A trial parameter vector lies outside the domain of a residual.

    The solver treats this as a rejected step rather than a hard failure.
    """


class NonPositiveDepth(InfeasiblePoint):
    pass


class NonFiniteResidual(BodyFitError, FloatingPointError):
    pass


class SolverDiverged(BodyFitError):
    pass


class DegenerateTorso(BodyFitError):
    pass


class MissingTorso(BodyFitError):
    pass


class DegenerateCluster(BodyFitError):
    pass


class EmptyPart(BodyFitError):
    pass


class DegenerateConfiguration(BodyFitError, ValueError):
    pass


class ParseError(BodyFitError):
    pass


class UnsupportedVersion(ParseError):
    pass


class InvariantViolation(BodyFitError):
    """Raised on load when one or more model invariants fail.

    ``violations`` holds ``(field_path, message)`` pairs for every failure.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{path}: {msg}" for path, msg in self.violations]
        super().__init__("invariant violation(s):\n  " + "\n  ".join(lines))


class UnknownJoint(BodyFitError, ValueError):
    pass
