"""Exception types shared across the package."""


class RFSplatError(Exception):
    """Base class for all package-specific errors."""


class GeometryError(RFSplatError, ValueError):
    """Degenerate geometry: zero-length direction, point on top of the receiver."""


class DegenerateCovarianceError(RFSplatError, ValueError):
    """Covariance matrix is singular or too ill-conditioned to invert reliably."""


class ShapeError(RFSplatError, ValueError):
    """Array arguments have mismatched or invalid shapes."""


class ContractViolationError(RFSplatError, RuntimeError):
    """A documented precondition was violated by the caller (unsorted hits, missing cache)."""


class ConfigError(RFSplatError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RFSplatError, ValueError):
    """Dataset or checkpoint files are malformed, missing, or of the wrong version."""


class NonFiniteGradientError(RFSplatError, RuntimeError):
    """An optimizer step received a NaN or infinite gradient."""

    def __init__(self, primitive_index: int, attribute: str):
        self.primitive_index = primitive_index
        self.attribute = attribute
        super().__init__(
            f"non-finite gradient for primitive {primitive_index} attribute {attribute!r}"
        )
