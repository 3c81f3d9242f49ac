"""Exception hierarchy shared by every trusttune module"""


class TrustTuneError(Exception):
    """Base class for all trusttune errors"""

    exit_code = 1


class ConfigError(TrustTuneError):
    """Invalid or unknown configuration values"""

    exit_code = 2


class ShapeError(TrustTuneError):
    """Tensor shapes do not satisfy an op's contract"""


class NumericError(TrustTuneError):
    """Non-finite values where finiteness is contracted"""


class GraphError(TrustTuneError):
    """Misuse of a compute graph (backward before forward, non-scalar loss, ...)"""


class DataFormatError(TrustTuneError):
    """Malformed split or checkpoint file"""

    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class GenerationError(TrustTuneError):
    """A task spec that cannot be realised (infeasible or rejection budget exhausted)"""


class InvariantViolation(TrustTuneError):
    """A hard invariant failed at runtime (frozen encoder changed, theory check failed)"""

    exit_code = 3


class ReportError(TrustTuneError):
    """A table or figure could not be written"""
