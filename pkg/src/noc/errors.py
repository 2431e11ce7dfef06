"""Exception hierarchy for the noc package.

Every library-level failure mode has a dedicated class so callers (and the CLI)
can turn failures into structured diagnostics instead of stack traces.
"""
from __future__ import annotations


class NocError(Exception):
    """Base class for all errors raised by this package."""


# ----------------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------------

class SingularMetric(NocError):
    """Metric matrix is numerically singular at the queried point."""


class BasePointMismatch(NocError):
    """Two tangent/cotangent objects were combined at different base points."""


class ChartEscape(NocError):
    """A curve or iterate left the valid domain of the coordinate chart."""


class OutOfInjectivityTrust(NocError):
    """log_map was asked to connect points beyond the chart's trust radius."""


class ShootingDiverged(NocError):
    """The log_map shooting iteration failed to converge."""


# ----------------------------------------------------------------------------
# dynamics
# ----------------------------------------------------------------------------

class NonFiniteState(NocError):
    """An integrated quantity became non-finite (NaN/Inf)."""


# ----------------------------------------------------------------------------
# cones / control sets
# ----------------------------------------------------------------------------

class PointNotInSet(NocError):
    """The base point of a cone query does not belong to the convex set."""


class DirectionNotInCone(NocError):
    """A direction required to lie in a tangent cone does not."""


class BoundViolated(NocError):
    """A certified bound (e.g. on lifted control norms) failed to hold."""


# ----------------------------------------------------------------------------
# conditions
# ----------------------------------------------------------------------------

class ConeViolation(NocError):
    """A per-node direction fails its pointwise cone requirement."""

    def __init__(self, message: str, node: int):
        super().__init__(message)
        self.node = node


class EndpointRowViolation(NocError):
    """A linearized endpoint row fails its sign/zero requirement."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class SigmaNotInB(NocError):
    """A candidate second-order control direction leaves its admissible set."""

    def __init__(self, message: str, node: int):
        super().__init__(message)
        self.node = node


class BoundNotVerified(NocError):
    """The square-summable node-bound required by a candidate could not be verified."""


class NoMultiplier(NocError):
    """The first-order multiplier cone is trivial: no nonzero multiplier exists."""


# ----------------------------------------------------------------------------
# optproblem
# ----------------------------------------------------------------------------

class DegenerateCone(NocError):
    """A tangent cone degenerated (empty interior data where some was required)."""


class EmptySecondCone(NocError):
    """The second-order tangent set of the queried direction is empty."""


class ResolutionTooCoarse(NocError):
    """Brute-force search cannot separate candidate values at this resolution."""


# ----------------------------------------------------------------------------
# input handling
# ----------------------------------------------------------------------------

class ProblemFileError(NocError):
    """A problem file failed to parse or validate; carries line/field context."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        loc = []
        if field:
            loc.append(field)
        if line is not None:
            loc.append(f"line {line}")
        full = f"{', '.join(loc)}: {message}" if loc else message
        super().__init__(full)
        self.line = line
        self.field = field
