"""Bit-exact software emulation of microscaling (MX) block floating-point formats."""

from mxscale.block_quant import (
    BLOCK_SIZE,
    Axis,
    MxBlock,
    MxTensor,
    QuantStats,
    dequantize_tensor,
    quantize_both_axes,
    quantize_tensor,
)
from mxscale.errors import AxisMismatch, NonFiniteElement, NonRepresentableSpecial
from mxscale.linalg import MmaConfig, MmaPath, mx_dot, mx_matmul
from mxscale.minifloat import E2M1, E2M3, E3M2, E4M3, E5M2, FORMATS, MiniFloatFormat, get_format
from mxscale.scaling import ScaleRoundingMode, compute_scale, decode_scale

__version__ = "0.1.0"
