"""Exception hierarchy shared by all otmatch modules.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError (and all
subclasses) -> 3, ConvergenceError -> 4.
"""


class MatchError(Exception):
    """Base class for all otmatch errors."""


class ConfigError(MatchError):
    """Invalid or inconsistent configuration (schedules, flags, parameter counts)."""


class DataError(MatchError):
    """Base class for malformed inputs and contract violations on data."""


class FormatError(DataError):
    """File does not follow the CMT1 layout (bad magic, unknown dtype code)."""


class CorruptFile(DataError):
    """CMT1 header and payload disagree (truncated or oversized payload)."""


class IoError(DataError):
    """Underlying filesystem failure while reading or writing."""


class InvalidShape(DataError):
    """Shape violates a container invariant (zero dims, odd channels, bad ndim)."""


class InvalidBox(DataError):
    """Bounding box is empty or falls outside the target mask."""


class ShapeMismatch(DataError):
    """Two operands that must agree in shape do not."""


class DegenerateFeature(DataError):
    """A feature vector has zero norm; cosine similarity is undefined."""


class InfeasibleFlow(DataError):
    """Requested matched mass exceeds min(total supply, total demand)."""


class OracleTooLarge(DataError):
    """Problem exceeds the size cap of the exact solver."""


class IsolatedNode(DataError):
    """An aggregation target has no connected source nodes."""


class InvalidThreshold(DataError):
    """Probability threshold outside [0, 1]."""


class EmptySupportForeground(DataError):
    """Support mask marks no foreground node."""


class EmptyInput(DataError):
    """An operation requiring a nonempty collection received an empty one."""


class ConvergenceError(MatchError):
    """Sinkhorn failed to reach an acceptable marginal defect.

    Carries the final defect so callers can report how far off the plan was.
    """

    def __init__(self, message: str, defect: float):
        super().__init__(message)
        self.defect = defect
