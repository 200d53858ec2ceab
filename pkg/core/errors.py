class StemError(Exception):
    exit_code = 1
    kind = "error"


class InvalidDimensionError(StemError, ValueError):
    kind = "invalid_dimension"


class CorruptFileError(StemError, OSError):
    kind = "corrupt_file"


class UnsupportedFormatError(StemError, ValueError):
    kind = "unsupported_format"


class ScheduleError(StemError, ValueError):
    kind = "schedule"


class SelectionError(StemError, ValueError):
    kind = "selection"


class UsageError(StemError, ValueError):
    kind = "usage"


class InvariantViolation(StemError, AssertionError):
    """An oracle or invariant check failed; the numbers are wrong, not the inputs."""

    exit_code = 2
    kind = "invariant"


class InternalError(StemError, RuntimeError):
    exit_code = 2
    kind = "internal"


class NonFiniteError(StemError, ValueError):
    kind = "non_finite"


class TensorIOError(StemError, OSError):
    kind = "io"
