"""Bit-exact codecs for the MX element types and BF16 rounding.

Element codes use the sign | exponent | mantissa layout with subnormals at
exponent field 0. Codes are plain integers (scalar API) or ``uint8`` arrays
(vector API); FP6/FP4 codes occupy the low bits of a byte.

All rounding is done on binary64 values. Every half-way point between two
neighbouring codes of a <=8-bit format is exactly representable in binary64,
so a single ``rint`` on the rescaled magnitude is a correct RN-ties-even.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from mxscale.errors import NonFiniteElement

__all__ = [
    "SpecialConvention",
    "MiniFloatFormat",
    "E4M3",
    "E5M2",
    "E2M3",
    "E3M2",
    "E2M1",
    "FORMATS",
    "get_format",
    "decode",
    "decode_array",
    "quantize",
    "quantize_array",
    "round_bf16",
]


class SpecialConvention(enum.Enum):
    IEEE = "ieee"  # all-ones exponent: Inf (mantissa 0) or NaN
    FINITE_ONLY_ONE_NAN = "fn"  # only S.1111.111 is NaN, no Inf
    FINITE_ONLY = "finite"  # every pattern is a finite number


@dataclass(frozen=True)
class MiniFloatFormat:
    """Descriptor of an ExMy element type."""

    name: str
    exp_bits: int
    man_bits: int
    bias: int
    special: SpecialConvention

    @property
    def width(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def sign_mask(self) -> int:
        return 1 << (self.width - 1)

    @property
    def emin(self) -> int:
        """Unbiased exponent of the smallest normal binade."""
        return 1 - self.bias

    @property
    def emax(self) -> int:
        """Unbiased exponent of the largest finite binade."""
        top = (1 << self.exp_bits) - 1
        if self.special is SpecialConvention.IEEE:
            top -= 1
        return top - self.bias

    @property
    def destmax(self) -> float:
        m = self.man_bits
        if self.special is SpecialConvention.FINITE_ONLY_ONE_NAN:
            # top mantissa pattern of the top binade is the NaN
            frac = (2 ** (m + 1) - 2) / 2**m
        else:
            frac = (2 ** (m + 1) - 1) / 2**m
        return math.ldexp(frac, self.emax)

    @property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.emin - self.man_bits)

    @property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.emin)

    @property
    def binades(self) -> float:
        return math.log2(self.destmax / self.min_subnormal)

    @property
    def has_nan(self) -> bool:
        return self.special is not SpecialConvention.FINITE_ONLY

    @property
    def nan_code(self) -> int | None:
        if not self.has_nan:
            return None
        # positive all-ones pattern: the single E4M3 NaN, a quiet NaN for E5M2
        return (1 << (self.width - 1)) - 1

    @property
    def max_code(self) -> int:
        """Positive code of ``destmax``."""
        return quantize(self.destmax, self)

    @cached_property
    def table(self) -> np.ndarray:
        """Decoded binary64 value of every code, indexed by code."""
        values = np.array([_decode_fields(c, self) for c in range(1 << self.width)])
        values.setflags(write=False)
        return values

    def __str__(self) -> str:
        return self.name


def _decode_fields(code: int, fmt: MiniFloatFormat) -> float:
    m = fmt.man_bits
    sign = -1.0 if code & fmt.sign_mask else 1.0
    efield = (code >> m) & ((1 << fmt.exp_bits) - 1)
    mfield = code & ((1 << m) - 1)
    all_ones_e = efield == (1 << fmt.exp_bits) - 1
    if fmt.special is SpecialConvention.IEEE and all_ones_e:
        return sign * math.inf if mfield == 0 else math.nan
    if fmt.special is SpecialConvention.FINITE_ONLY_ONE_NAN and all_ones_e and mfield == (1 << m) - 1:
        return math.nan
    if efield == 0:
        return sign * math.ldexp(mfield, fmt.emin - m)
    return sign * math.ldexp((1 << m) + mfield, efield - fmt.bias - m)


E4M3 = MiniFloatFormat("E4M3", 4, 3, 7, SpecialConvention.FINITE_ONLY_ONE_NAN)
E5M2 = MiniFloatFormat("E5M2", 5, 2, 15, SpecialConvention.IEEE)
E2M3 = MiniFloatFormat("E2M3", 2, 3, 1, SpecialConvention.FINITE_ONLY)
E3M2 = MiniFloatFormat("E3M2", 3, 2, 3, SpecialConvention.FINITE_ONLY)
E2M1 = MiniFloatFormat("E2M1", 2, 1, 1, SpecialConvention.FINITE_ONLY)

# Ordering doubles as the MXT format id.
FORMATS: tuple[MiniFloatFormat, ...] = (E4M3, E5M2, E2M3, E3M2, E2M1)


def get_format(name: str | MiniFloatFormat) -> MiniFloatFormat:
    if isinstance(name, MiniFloatFormat):
        return name
    key = name.strip().upper()
    for fmt in FORMATS:
        if fmt.name == key:
            return fmt
    raise ValueError(f"unknown element format {name!r}; expected one of "
                     + ", ".join(f.name.lower() for f in FORMATS))


def decode(code: int, fmt: MiniFloatFormat) -> float:
    if not 0 <= code < (1 << fmt.width):
        raise ValueError(f"code {code:#x} does not fit {fmt.width}-bit {fmt.name}")
    return float(fmt.table[code])


def decode_array(codes: np.ndarray, fmt: MiniFloatFormat) -> np.ndarray:
    return fmt.table[np.asarray(codes, dtype=np.intp)]


def quantize_array(values, fmt: MiniFloatFormat) -> np.ndarray:
    """Saturating RN-ties-even quantization of finite values to codes.

    Returns a ``uint8`` array of the same shape as ``values``.
    """
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteElement(f"{fmt.name} quantizer received NaN/Inf")
    m = fmt.man_bits
    mag = np.abs(x)
    negative = np.signbit(x)

    _, fexp = np.frexp(mag)
    quantum_exp = np.maximum(fexp - 1, fmt.emin) - m
    units = np.rint(np.ldexp(mag, -quantum_exp))
    with np.errstate(over="ignore"):
        # huge inputs may overflow to Inf here; they saturate just below
        rounded = np.minimum(np.ldexp(units, quantum_exp), fmt.destmax)

    # re-derive fields from the rounded value; rounding may have carried into
    # the next binade
    _, rexp = np.frexp(rounded)
    e = rexp - 1
    is_normal = (rounded != 0) & (e >= fmt.emin)
    e_safe = np.where(is_normal, e, fmt.emin)
    mant = np.ldexp(rounded, m - e_safe).astype(np.int64)
    efield = np.where(is_normal, e_safe + fmt.bias, 0)
    mfield = np.where(is_normal, mant - (1 << m), mant)

    codes = (efield << m) | mfield
    codes = codes | np.where(negative, fmt.sign_mask, 0)
    return codes.astype(np.uint8)


def quantize(value: float, fmt: MiniFloatFormat) -> int:
    """Scalar form of :func:`quantize_array`."""
    if not math.isfinite(value):
        raise NonFiniteElement(f"cannot quantize {value!r} to {fmt.name}")
    return int(quantize_array(np.array([value]), fmt)[0])


_BF16_MASK = np.uint32(0xFFFF0000)


def round_bf16(values):
    """Round binary32 values to BF16 precision (RN-ties-even), kept as binary32.

    Overflow rounds to Inf as an IEEE cast would; NaN stays NaN.
    """
    scalar = np.ndim(values) == 0
    x = np.array(values, dtype=np.float32, ndmin=1)
    bits = x.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    out = ((bits + np.uint32(0x7FFF) + lsb) & _BF16_MASK).view(np.float32)
    out = np.where(np.isnan(x), x, out)
    return out[0] if scalar else out.reshape(np.shape(values))
