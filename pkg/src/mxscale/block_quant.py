"""Quantization of 2-D binary32 tensors into MX blocks and back.

``Axis.ROW`` means blocks run along a row: each row of a ``(rows, cols)``
tensor is cut into ``ceil(cols / 32)`` blocks, the last one possibly short.
``Axis.COL`` cuts each column the same way. A GEMM operand must be blocked
along the contraction dimension, which is why training keeps one copy per
axis.

Scales are stored as a 2-D ``uint8`` array: ``(rows, nblocks)`` for row
blocking and ``(nblocks, cols)`` for column blocking, so transposing an
``MxTensor`` is a pure relabelling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from mxscale.errors import EmptyTensor, NonRepresentableSpecial
from mxscale.minifloat import MiniFloatFormat, decode_array, quantize_array
from mxscale.scaling import SCALE_BIAS, SCALE_NAN, ScaleRoundingMode, compute_scale_array

__all__ = [
    "BLOCK_SIZE",
    "Axis",
    "MxBlock",
    "MxTensor",
    "QuantStats",
    "quantize_block",
    "quantize_tensor",
    "dequantize_tensor",
    "quantize_both_axes",
]

BLOCK_SIZE = 32

# elements processed per slab; bounds the binary64 temporaries
_SLAB_ELEMENTS = 1 << 20


class Axis(enum.Enum):
    ROW = "row"
    COL = "col"

    @property
    def other(self) -> "Axis":
        return Axis.COL if self is Axis.ROW else Axis.ROW

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, eq=False)
class MxBlock:
    codes: np.ndarray
    scale: int
    format: MiniFloatFormat

    def values(self) -> np.ndarray:
        if self.scale == SCALE_NAN:
            return np.full(len(self.codes), np.nan)
        return np.ldexp(decode_array(self.codes, self.format), self.scale - SCALE_BIAS)


@dataclass(frozen=True, eq=False)
class MxTensor:
    rows: int
    cols: int
    axis: Axis
    format: MiniFloatFormat
    codes: np.ndarray
    scales: np.ndarray
    mode: ScaleRoundingMode
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise EmptyTensor(f"shape ({self.rows}, {self.cols}) is empty")
        if self.codes.shape != (self.rows, self.cols):
            raise ValueError(f"codes shape {self.codes.shape} != ({self.rows}, {self.cols})")
        if self.scales.shape != self.scale_shape:
            raise ValueError(f"scales shape {self.scales.shape} != {self.scale_shape}")
        if self.codes.dtype != np.uint8 or self.scales.dtype != np.uint8:
            raise TypeError("codes and scales must be uint8")
        if self.codes.size and int(self.codes.max()) >= 1 << self.format.width:
            raise ValueError(f"code does not fit {self.format.width}-bit {self.format.name}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_blocks_per_line(self) -> int:
        length = self.cols if self.axis is Axis.ROW else self.rows
        return -(-length // self.block_size)

    @property
    def scale_shape(self) -> tuple[int, int]:
        if self.axis is Axis.ROW:
            return (self.rows, self.n_blocks_per_line)
        return (self.n_blocks_per_line, self.cols)

    @property
    def T(self) -> "MxTensor":
        """Transpose by relabelling; no requantization happens."""
        return MxTensor(self.cols, self.rows, self.axis.other, self.format,
                        self.codes.T.copy(), self.scales.T.copy(), self.mode, self.block_size)

    def line_blocks(self, index: int) -> list[MxBlock]:
        """Blocks of row ``index`` (row blocking) or column ``index`` (column blocking)."""
        bs = self.block_size
        if self.axis is Axis.ROW:
            line, scales = self.codes[index], self.scales[index]
        else:
            line, scales = self.codes[:, index], self.scales[:, index]
        return [MxBlock(line[j * bs:(j + 1) * bs].copy(), int(s), self.format)
                for j, s in enumerate(scales)]

    def expanded_exponents(self) -> np.ndarray:
        """Per-element unbiased scale exponent, shape ``(rows, cols)``."""
        x = self.scales.astype(np.int64) - SCALE_BIAS
        if self.axis is Axis.ROW:
            return np.repeat(x, self.block_size, axis=1)[:, :self.cols]
        return np.repeat(x, self.block_size, axis=0)[:self.rows, :]

    def __eq__(self, other):
        if not isinstance(other, MxTensor):
            return NotImplemented
        return (self.shape == other.shape and self.axis is other.axis
                and self.format == other.format and self.mode is other.mode
                and self.block_size == other.block_size
                and np.array_equal(self.codes, other.codes)
                and np.array_equal(self.scales, other.scales))

    __hash__ = None


@dataclass
class QuantStats:
    """Counters for one or more quantizations.

    ``n_saturated`` counts elements whose scaled magnitude exceeded destmax
    and was clamped; landing exactly on destmax is not a saturation.
    ``n_below_range`` counts nonzero elements whose scaled magnitude is
    below the smallest subnormal, ``n_flushed_to_zero`` those that ended up
    as zero.
    """

    n_elements: int = 0
    n_saturated: int = 0
    n_flushed_to_zero: int = 0
    n_exact: int = 0
    n_below_range: int = 0
    sum_sq_error: float = 0.0
    sum_sq_signal: float = 0.0
    n_blocks: int = 0
    n_blocks_saturated: int = 0
    n_nan_blocks: int = 0
    scale_histogram: dict[int, int] = field(default_factory=dict)

    def __iadd__(self, other: "QuantStats") -> "QuantStats":
        for name in ("n_elements", "n_saturated", "n_flushed_to_zero", "n_exact",
                     "n_below_range", "sum_sq_error", "sum_sq_signal", "n_blocks",
                     "n_blocks_saturated", "n_nan_blocks"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        for x, n in other.scale_histogram.items():
            self.scale_histogram[x] = self.scale_histogram.get(x, 0) + n
        return self

    @property
    def mse(self) -> float:
        return self.sum_sq_error / self.n_elements if self.n_elements else float("nan")

    @property
    def sqnr_db(self) -> float | None:
        """10*log10(signal/error); ``None`` when the signal is all zero."""
        if self.sum_sq_signal == 0:
            return None
        if self.sum_sq_error == 0:
            return float("inf")
        return float(10 * np.log10(self.sum_sq_signal / self.sum_sq_error))

    @property
    def saturation_rate(self) -> float:
        return self.n_blocks_saturated / self.n_blocks if self.n_blocks else 0.0

    @property
    def underflow_rate(self) -> float:
        return self.n_flushed_to_zero / self.n_elements if self.n_elements else 0.0

    @property
    def below_range_rate(self) -> float:
        return self.n_below_range / self.n_elements if self.n_elements else 0.0


def _quantize_lines(src: np.ndarray, fmt: MiniFloatFormat, mode: ScaleRoundingMode,
                    bs: int, codes_out: np.ndarray, scales_out: np.ndarray,
                    stats: QuantStats) -> None:
    """Quantize each row of ``src`` (float32, 2-D) in blocks of ``bs``."""
    rows, cols = src.shape
    nb = -(-cols // bs)
    padded = np.zeros((rows, nb * bs), dtype=np.float32)
    padded[:, :cols] = src
    blocks = padded.reshape(rows, nb, bs)
    valid = np.zeros(nb * bs, dtype=bool)
    valid[:cols] = True
    valid = np.broadcast_to(valid.reshape(nb, bs), blocks.shape)

    special = ~np.all(np.isfinite(blocks), axis=-1)
    if np.any(special) and not fmt.has_nan:
        raise NonRepresentableSpecial(f"{fmt.name} has no NaN encoding for a NaN/Inf block")
    with np.errstate(invalid="ignore"):
        amax = np.max(np.abs(blocks), axis=-1)
    amax[special] = np.nan
    scale_bytes = compute_scale_array(amax, fmt, mode)

    x = scale_bytes.astype(np.int64) - SCALE_BIAS
    x[special] = 0
    src64 = np.where(special[..., None], 0.0, blocks.astype(np.float64))
    scaled = np.ldexp(src64, -x[..., None])
    codes = quantize_array(scaled, fmt)
    if np.any(special):
        codes[special] = fmt.nan_code

    codes_out[:] = codes.reshape(rows, nb * bs)[:, :cols]
    scales_out[:] = scale_bytes

    finite = valid & ~special[..., None]
    deq = np.ldexp(decode_array(codes, fmt), x[..., None])
    mag = np.abs(scaled)
    saturated = finite & (mag > fmt.destmax)
    nonzero = finite & (scaled != 0)
    err = np.where(finite, deq - src64, 0.0)

    stats.n_elements += int(np.count_nonzero(valid))
    stats.n_saturated += int(np.count_nonzero(saturated))
    stats.n_flushed_to_zero += int(np.count_nonzero(nonzero & (deq == 0)))
    stats.n_below_range += int(np.count_nonzero(nonzero & (mag < fmt.min_subnormal)))
    stats.n_exact += int(np.count_nonzero(finite & (deq == src64)))
    stats.sum_sq_error += float(np.sum(err * err))
    stats.sum_sq_signal += float(np.sum(np.where(finite, src64 * src64, 0.0)))
    stats.n_blocks += rows * nb
    stats.n_blocks_saturated += int(np.count_nonzero(np.any(saturated, axis=-1)))
    stats.n_nan_blocks += int(np.count_nonzero(special))
    exps, counts = np.unique(x[~special], return_counts=True)
    for e, n in zip(exps.tolist(), counts.tolist()):
        stats.scale_histogram[e] = stats.scale_histogram.get(e, 0) + n


def quantize_tensor(tensor, axis: Axis, fmt: MiniFloatFormat, mode: ScaleRoundingMode,
                    block_size: int = BLOCK_SIZE) -> tuple[MxTensor, QuantStats]:
    """Quantize a 2-D tensor along ``axis``; returns the MX tensor and its stats.

    Each element is divided by its block scale ``2**X`` exactly (binary64
    exponent adjustment) before saturating RN-ties-even quantization.
    """
    t = np.asarray(tensor, dtype=np.float32)
    if t.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {t.shape}")
    if t.size == 0:
        raise EmptyTensor(f"cannot quantize empty tensor of shape {t.shape}")
    axis = Axis(axis)
    lines = t if axis is Axis.ROW else t.T
    n_lines, length = lines.shape
    nb = -(-length // block_size)

    codes = np.empty((n_lines, length), dtype=np.uint8)
    scales = np.empty((n_lines, nb), dtype=np.uint8)
    stats = QuantStats()
    step = max(1, _SLAB_ELEMENTS // max(length, 1))
    for start in range(0, n_lines, step):
        sl = slice(start, start + step)
        _quantize_lines(lines[sl], fmt, mode, block_size, codes[sl], scales[sl], stats)

    if axis is Axis.COL:
        codes, scales = np.ascontiguousarray(codes.T), np.ascontiguousarray(scales.T)
    rows, cols = t.shape
    return MxTensor(rows, cols, axis, fmt, codes, scales, mode, block_size), stats


def dequantize_tensor(q: MxTensor) -> np.ndarray:
    """Decode to binary32: ``decode(code) * 2**X`` exactly, then one rounding."""
    values = np.ldexp(decode_array(q.codes, q.format), q.expanded_exponents())
    nan_scale = q.expanded_exponents() == SCALE_NAN - SCALE_BIAS
    values[nan_scale] = np.nan
    with np.errstate(over="ignore"):
        return values.astype(np.float32)


def quantize_both_axes(tensor, fmt: MiniFloatFormat,
                       mode: ScaleRoundingMode) -> tuple[MxTensor, MxTensor]:
    """Row- and column-blocked copies, both taken from the binary32 source."""
    row, _ = quantize_tensor(tensor, Axis.ROW, fmt, mode)
    col, _ = quantize_tensor(tensor, Axis.COL, fmt, mode)
    return row, col


def quantize_block(values, fmt: MiniFloatFormat, mode: ScaleRoundingMode) -> MxBlock:
    """Quantize one run of at most ``BLOCK_SIZE`` values."""
    v = np.asarray(values, dtype=np.float32).reshape(1, -1)
    if v.shape[1] > BLOCK_SIZE:
        raise ValueError(f"a block holds at most {BLOCK_SIZE} elements, got {v.shape[1]}")
    q, _ = quantize_tensor(v, Axis.ROW, fmt, mode)
    return q.line_blocks(0)[0]
