"""Exception hierarchy shared by all simulator modules."""


class XbeamError(Exception):
    """Base class for every error raised by this package."""


class InvalidDimension(XbeamError, ValueError):
    """A size argument is zero, negative or inconsistent."""


class InvalidArgument(XbeamError, ValueError):
    """An argument is outside its admissible range."""


class ConfigError(XbeamError, ValueError):
    """A configuration violates one of its invariants."""


class ConstraintViolation(XbeamError, ValueError):
    """A codebook does not satisfy the hardware constraints required by an operation."""


class DegenerateInput(XbeamError, ValueError):
    """Input carries no usable energy (for example an all-zero matrix)."""


class EstimationFailure(XbeamError, ArithmeticError):
    """Channel estimation is impossible with the supplied pilots."""


class MalformedReport(XbeamError, ValueError):
    """A CSI report has out-of-range fields or a truncated wire encoding."""


class SchedulingCapacity(XbeamError, ValueError):
    """More users were scheduled than the port budget can multiplex."""


class AliasingError(XbeamError, ValueError):
    """An angular grid is coarser than the array it represents."""


class FingerprintMismatch(XbeamError, ValueError):
    """A checkpoint was produced for a different network shape."""


class FormatError(XbeamError, ValueError):
    """A binary or text file does not match the expected layout."""
