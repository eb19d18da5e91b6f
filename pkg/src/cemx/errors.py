"""Exception types shared across the toolkit."""


class CemxError(Exception):
    """Base class for all toolkit errors."""


class InvalidDims(CemxError):
    """Image/kernel/grid dimensions are incompatible with the operation."""


class IoError(CemxError):
    """Unreadable or malformed image file."""


class KernelFormatError(CemxError):
    """Malformed kernel file or kernel that cannot be normalized."""


class SingularKernel(CemxError):
    """The composed filter cannot be inverted (all-zero spectrum)."""


class OracleTooLarge(CemxError):
    """Dense oracle requested for a grid beyond the supported size."""


class GraphShapeError(CemxError):
    """Shape mismatch or non-scalar root in a differentiation graph."""


class EmptyRegion(CemxError):
    """A region mask selects no pixels."""


class InvalidParam(CemxError):
    """Out-of-range or wrongly typed parameter."""


class CalibrationError(CemxError):
    """Not enough data to calibrate percentiles."""


class EstimationError(CemxError):
    """Degenerate input for period estimation."""


class Busy(CemxError):
    """A job is already running on this session."""


class NothingToUndo(CemxError):
    """Undo requested with an empty history."""
