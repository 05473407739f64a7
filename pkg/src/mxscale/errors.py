"""Exception types raised across the package."""


class MxError(Exception):
    """Base class for all mxscale errors."""


class NonFiniteElement(MxError, ValueError):
    """A NaN or Inf reached the element quantizer."""


class NonRepresentableSpecial(MxError, ValueError):
    """A block holds NaN/Inf but the element format has no NaN encoding."""


class InvalidAmax(MxError, ValueError):
    """Block amax was negative."""


class EmptyTensor(MxError, ValueError):
    pass


class AxisMismatch(MxError, ValueError):
    """GEMM operands are not blocked along the contraction dimension."""


class BlockMismatch(MxError, ValueError):
    """Two block sequences do not line up for a dot product."""


class InvariantViolation(MxError, AssertionError):
    """An internal consistency check failed."""


class GradcheckFailure(MxError):
    def __init__(self, role: str, deviation: float, tol: float):
        super().__init__(f"gradient for {role} deviates by {deviation:.3e} (tol {tol:.1e})")
        self.role = role
        self.deviation = deviation
        self.tol = tol


class MxtError(MxError, ValueError):
    """Malformed MXT container. ``field`` names the offending header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BadMagic(MxtError):
    pass


class UnsupportedVersion(MxtError):
    pass


class UnsupportedFormat(MxtError):
    pass


class LengthMismatch(MxtError):
    pass


class MalformedHeader(MxtError):
    pass
