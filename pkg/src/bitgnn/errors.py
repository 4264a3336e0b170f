"""Exception types shared across the package."""


class DataError(ValueError):
    """Input data violates a value-level contract (non-finite, non-binary, ...)."""


class ShapeError(ValueError):
    """Operand dimensions or orientations are incompatible."""


class FormatError(ValueError):
    """A serialized payload is malformed (bad magic, version, truncation)."""


class ReductionOverflowError(ArithmeticError):
    """The shifted cross-plane reduction does not fit a signed 32-bit output."""
