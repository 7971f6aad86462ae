"""Exception types shared across the planner."""


class WBPlanError(Exception):
    """Base class for all planner errors."""


class InputError(WBPlanError, ValueError):
    """Rejected input (non-finite values, malformed files)."""


class ConfigError(WBPlanError, ValueError):
    """Invalid or infeasible configuration."""


class DomainError(WBPlanError, ValueError):
    """Argument outside the domain of a function (e.g. time out of range)."""


class PreconditionError(WBPlanError, ValueError):
    """A documented precondition does not hold."""


class InfeasibleError(WBPlanError):
    """No feasible solution below a configured cap."""


class SingularityError(WBPlanError):
    """Thrust-singular (free-fall) state; attitude is undefined."""


class StitchError(WBPlanError):
    """Adjacent trajectory parts do not share a boundary state."""

    def __init__(self, junction, component, jump):
        self.junction = junction
        self.component = component
        self.jump = jump
        super().__init__(
            f"boundary mismatch at junction {junction}: component {component} jumps by {jump:.3g}"
        )


class StateError(WBPlanError):
    """Operation on an object in the wrong lifecycle state."""


class SeedError(WBPlanError):
    """A corridor seed could not be placed in free space."""


class CorridorError(WBPlanError):
    """Corridor construction failed or violates the overlap invariant."""


class NumericalError(WBPlanError):
    """Non-finite objective or gradient during optimization."""


class PlanFailure(WBPlanError):
    """Planning failed; carries the pipeline stage, segment index and reason."""

    def __init__(self, stage, reason, segment=None, stats=None):
        self.stage = stage
        self.reason = reason
        self.segment = segment
        self.stats = stats or {}
        where = f" (segment {segment})" if segment is not None else ""
        super().__init__(f"{stage}{where}: {reason}")
