"""Exception hierarchy shared by all fluxforge modules."""


class FluxError(Exception):
    """Base class for every error raised by fluxforge."""


class UsageError(FluxError, ValueError):
    """Invalid arguments or configuration (CLI exit code 2)."""


class ParseError(UsageError):
    """Malformed input file. ``line`` is 1-based, or None when not applicable."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GeometryError(FluxError):
    """Physically impossible placement (overlapping magnets, plane through a source)."""


class SingularityError(FluxError):
    """Evaluation point falls inside the exclusion zone of a dipole."""

    def __init__(self, message, dipole_index=None, point_index=None):
        self.dipole_index = dipole_index
        self.point_index = point_index
        super().__init__(message)


class PathError(SingularityError):
    """An integration path crosses an exclusion zone."""


class DegenerateSeedError(FluxError):
    """Streamline seed sits on a zero-field point."""


class NeelOverflowError(FluxError, OverflowError):
    """Néel exponent too large: the particle is magnetically blocked."""


class InsufficientDataError(FluxError):
    """Too few samples for the requested operation."""


class NotASingleArmError(FluxError):
    """Trace winds back and forth instead of following one spiral arm."""


class DegenerateFitError(FluxError):
    """Least-squares problem has no unique solution."""
