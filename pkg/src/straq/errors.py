"""Exception hierarchy for the straq engine."""


class StraqError(Exception):
    """Base class for all engine errors."""


class SchemaError(StraqError):
    """Malformed input data, unknown column, or a type coercion failure."""


class DuplicateTableError(StraqError):
    """A table with this name is already registered."""


class ManifestError(StraqError):
    """Manifest cannot be loaded: version mismatch, missing block, bad checksum."""


class SampleError(StraqError):
    """Invalid sampling parameters or level index."""


class PlanInfeasibleError(StraqError):
    """No sample plan satisfies the storage and drift constraints."""


class EstimationError(StraqError):
    """Estimate cannot be produced from the given inputs."""


class MissingSubgroupError(EstimationError):
    """The sample contains no rows for the requested subgroup."""


class ParseError(StraqError):
    """Query text is not valid; carries the offending position."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class QueryError(StraqError):
    """Query is well-formed but cannot run (missing table, bad column, ...)."""


class TimeBoundError(QueryError):
    """The time bound is smaller than a single probe's duration."""
