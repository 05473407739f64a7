"""UE8M0 shared-scale computation.

A scale byte ``b`` in ``[0, 254]`` means ``2**(b - 127)``; ``255`` is NaN.
Exponents handled internally are unbiased; the bias is added only when the
byte is produced.

Two rounding rules are provided:

``ROUND_UP``
    ``X = ceil(log2(amax / destmax))`` evaluated in bit space on a binary32
    quotient, so ``amax / 2**X`` never exceeds ``destmax``.
``OCP_FLOOR``
    ``X = floor(log2(amax)) - floor(log2(destmax))``, which ignores the
    significands and can push the scaled amax above ``destmax``.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from mxscale.errors import InvalidAmax
from mxscale.minifloat import MiniFloatFormat

__all__ = [
    "ScaleRoundingMode",
    "SCALE_BIAS",
    "SCALE_NAN",
    "X_MIN",
    "X_MAX",
    "compute_scale",
    "compute_scale_array",
    "scale_exponent_array",
    "decode_scale",
    "parse_mode",
]

SCALE_BIAS = 127
SCALE_NAN = 255
X_MIN = -127
X_MAX = 127


class ScaleRoundingMode(enum.Enum):
    ROUND_UP = "up"
    OCP_FLOOR = "ocp-floor"

    def __str__(self) -> str:
        return self.value


def parse_mode(mode: str | ScaleRoundingMode) -> ScaleRoundingMode:
    if isinstance(mode, ScaleRoundingMode):
        return mode
    try:
        return ScaleRoundingMode(mode)
    except ValueError:
        raise ValueError(f"unknown scale rounding {mode!r}; expected 'up' or 'ocp-floor'") from None


def _significand_and_exponent(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split positive binary32 values into a [1, 2) significand and exponent.

    Subnormal inputs are normalised, so the exponent may drop below -126.
    """
    frac, exp = np.frexp(x)
    return frac * np.float32(2), exp.astype(np.int64) - 1


def scale_exponent_array(amax, fmt: MiniFloatFormat, mode: ScaleRoundingMode) -> np.ndarray:
    """Unbiased clamped exponent X for finite, strictly positive amax values."""
    a = np.asarray(amax, dtype=np.float32)
    sig_a, exp_a = _significand_and_exponent(a)
    dest_sig, dest_exp = math.frexp(fmt.destmax)
    dest_sig, dest_exp = np.float32(dest_sig * 2), dest_exp - 1

    if mode is ScaleRoundingMode.OCP_FLOOR:
        x = exp_a - dest_exp
    else:
        # binary32 RN quotient of the significands; its exponent field is
        # either 126 (quotient in (0.5, 1)) or 127 (quotient in [1, 2)).
        # Keeping the exponents apart avoids binary32 subnormal ratios, which
        # would lose the bits that tell a power of two from its successor.
        q = (sig_a / dest_sig).astype(np.float32)
        qbits = q.view(np.uint32)
        q_exp = ((qbits >> np.uint32(23)) & np.uint32(0xFF)).astype(np.int64) - 127
        q_man = qbits & np.uint32(0x7FFFFF)
        ratio_exp = exp_a - dest_exp + q_exp
        # ratio below 2**-127 is pinned to the smallest scale
        x = np.where(ratio_exp < X_MIN, X_MIN, ratio_exp + (q_man != 0))
    return np.clip(x, X_MIN, X_MAX)


def compute_scale_array(amax, fmt: MiniFloatFormat, mode: ScaleRoundingMode) -> np.ndarray:
    """Vector form of :func:`compute_scale`; returns ``uint8`` scale bytes."""
    a = np.asarray(amax, dtype=np.float32)
    if np.any(a < 0):
        raise InvalidAmax("amax must be >= 0")
    special = ~np.isfinite(a)
    zero = a == 0
    regular = ~(special | zero)
    x = np.full(a.shape, X_MIN, dtype=np.int64)
    if np.any(regular):
        x[regular] = scale_exponent_array(a[regular], fmt, mode)
    out = (x + SCALE_BIAS).astype(np.uint8)
    out[special] = SCALE_NAN
    return out


def compute_scale(amax: float, fmt: MiniFloatFormat, mode: ScaleRoundingMode) -> int:
    """Scale byte for one block given its amax (interpreted as binary32)."""
    if amax < 0:
        raise InvalidAmax(f"amax must be >= 0, got {amax!r}")
    return int(compute_scale_array(np.array([amax]), fmt, parse_mode(mode))[0])


def decode_scale(byte: int) -> float:
    if not 0 <= byte <= 255:
        raise ValueError(f"scale byte out of range: {byte}")
    if byte == SCALE_NAN:
        return math.nan
    return math.ldexp(1.0, byte - SCALE_BIAS)
