"""Matrix multiplication over MX tensors.

Both paths accumulate in binary32 with the same fixed order: within a block,
products are summed sequentially over the 32 positions; block results are
then added sequentially in block order. Output elements are independent, so
the vectorised loops below give the same bits as any per-element schedule.

``EXACT_SCALED``
    Multiply decoded codes, sum per block, apply ``2**(Xa + Xb)`` once per
    block, accumulate.
``BF16_EMULATION``
    Dequantize each operand, round it to BF16, and run a BF16-input matmul
    with the same binary32 accumulation.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mxscale.block_quant import Axis, MxBlock, MxTensor, QuantStats, dequantize_tensor, quantize_tensor
from mxscale.errors import AxisMismatch, BlockMismatch
from mxscale.minifloat import MiniFloatFormat, decode_array, round_bf16
from mxscale.scaling import SCALE_BIAS, SCALE_NAN, ScaleRoundingMode

__all__ = [
    "MmaPath",
    "MmaConfig",
    "mx_dot",
    "mx_matmul",
    "f32_matmul",
    "bf16_overflow_count",
    "quantize_mma_output",
]


class MmaPath(enum.Enum):
    EXACT_SCALED = "exact"
    BF16_EMULATION = "bf16"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class MmaConfig:
    path: MmaPath = MmaPath.EXACT_SCALED
    # the only accumulation order implemented: per-block sums, then blocks in order
    accumulation_order: str = "sequential-blocks"


def _scale_to_f32(partial: np.ndarray, exponent) -> np.ndarray:
    # exact power-of-two scaling in binary64, then a single rounding to binary32
    with np.errstate(over="ignore"):
        return np.ldexp(partial.astype(np.float64), exponent).astype(np.float32)


def mx_dot(a: Sequence[MxBlock], b: Sequence[MxBlock]) -> np.float32:
    """Dot product of two equally blocked MX vectors, accumulated in binary32."""
    if len(a) != len(b):
        raise BlockMismatch(f"{len(a)} blocks vs {len(b)} blocks")
    acc = np.float32(0)
    for blk_a, blk_b in zip(a, b):
        if len(blk_a.codes) != len(blk_b.codes):
            raise BlockMismatch(f"block lengths {len(blk_a.codes)} and {len(blk_b.codes)} differ")
        if blk_a.scale == SCALE_NAN or blk_b.scale == SCALE_NAN:
            return np.float32(np.nan)
        qa = decode_array(blk_a.codes, blk_a.format).astype(np.float32)
        qb = decode_array(blk_b.codes, blk_b.format).astype(np.float32)
        inner = np.float32(0)
        for x, y in zip(qa, qb):
            inner = np.float32(inner + np.float32(x * y))
        scaled = _scale_to_f32(np.asarray(inner), blk_a.scale + blk_b.scale - 2 * SCALE_BIAS)
        acc = np.float32(acc + scaled)
    return acc


def _check_operands(a: MxTensor, b: MxTensor) -> None:
    if a.axis is not Axis.ROW:
        raise AxisMismatch("left operand must be blocked along its rows (axis=row), "
                           f"got axis={a.axis}")
    if b.axis is not Axis.COL:
        raise AxisMismatch("right operand must be blocked along its columns (axis=col), "
                           f"got axis={b.axis}")
    if a.cols != b.rows:
        raise AxisMismatch(f"contraction sizes differ: {a.cols} vs {b.rows}")
    if a.block_size != b.block_size:
        raise AxisMismatch(f"block sizes differ: {a.block_size} vs {b.block_size}")


def _blocked_accumulate(av: np.ndarray, bv: np.ndarray, bs: int,
                        a_exp: np.ndarray | None = None,
                        b_exp: np.ndarray | None = None) -> np.ndarray:
    """Sequential per-block binary32 sums; optional per-block power-of-two scaling.

    ``av`` is (M, K), ``bv`` is (K, N), both binary32. ``a_exp`` is (M, nb)
    and ``b_exp`` is (nb, N) when scaling is requested.
    """
    m, k = av.shape
    n = bv.shape[1]
    acc = np.zeros((m, n), dtype=np.float32)
    for j, start in enumerate(range(0, k, bs)):
        inner = np.zeros((m, n), dtype=np.float32)
        for p in range(start, min(start + bs, k)):
            inner += np.multiply.outer(av[:, p], bv[p, :])
        if a_exp is not None:
            inner = _scale_to_f32(inner, a_exp[:, j, None] + b_exp[None, j, :])
        acc += inner
    return acc


def mx_matmul(a: MxTensor, b: MxTensor, cfg: MmaConfig = MmaConfig()) -> np.ndarray:
    """``A @ B`` for row-blocked ``A`` and column-blocked ``B``; binary32 result."""
    _check_operands(a, b)
    nan_rows = np.any(a.scales == SCALE_NAN, axis=1)
    nan_cols = np.any(b.scales == SCALE_NAN, axis=0)
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.path is MmaPath.EXACT_SCALED:
            av = decode_array(a.codes, a.format).astype(np.float32)
            bv = decode_array(b.codes, b.format).astype(np.float32)
            a_exp = a.scales.astype(np.int64) - SCALE_BIAS
            b_exp = b.scales.astype(np.int64) - SCALE_BIAS
            out = _blocked_accumulate(av, bv, a.block_size, a_exp, b_exp)
        else:
            av = round_bf16(dequantize_tensor(a))
            bv = round_bf16(dequantize_tensor(b))
            n_inf = int(np.count_nonzero(np.isinf(av)) + np.count_nonzero(np.isinf(bv)))
            if n_inf:
                warnings.warn(f"{n_inf} operand values overflowed BF16 to Inf", RuntimeWarning)
            out = _blocked_accumulate(av, bv, a.block_size)
    out[nan_rows, :] = np.nan
    out[:, nan_cols] = np.nan
    return out


def f32_matmul(a, b, block_size: int = 32) -> np.ndarray:
    """Binary32 matmul with the same accumulation order as :func:`mx_matmul`."""
    av = np.asarray(a, dtype=np.float32)
    bv = np.asarray(b, dtype=np.float32)
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"shapes {av.shape} and {bv.shape} do not contract")
    return _blocked_accumulate(av, bv, block_size)


def bf16_overflow_count(q: MxTensor) -> int:
    """Number of elements that become Inf when the dequantized tensor is cast to BF16."""
    with np.errstate(over="ignore"):
        return int(np.count_nonzero(np.isinf(round_bf16(dequantize_tensor(q)))))


def quantize_mma_output(c, axis: Axis, fmt: MiniFloatFormat,
                        mode: ScaleRoundingMode) -> tuple[MxTensor, QuantStats]:
    """Requantize a binary32 GEMM output for a consumer that needs MX input."""
    return quantize_tensor(np.asarray(c, dtype=np.float32), axis, fmt, mode)
