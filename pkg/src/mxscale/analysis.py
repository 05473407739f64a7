"""Differential quantization statistics: scale rounding modes and element formats."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from mxscale.block_quant import Axis, QuantStats, quantize_tensor
from mxscale.minifloat import FORMATS, MiniFloatFormat
from mxscale.scaling import ScaleRoundingMode

__all__ = [
    "PRNG_NAME",
    "ModeComparison",
    "gaussian_tensor",
    "compare_rounding",
    "dtype_sweep",
    "ocp_saturation_predicate",
    "report_records",
    "format_text_report",
    "format_kv_report",
]

PRNG_NAME = "numpy.PCG64"


def gaussian_tensor(rows: int, cols: int, seed: int, std: float = 1.0) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return (rng.standard_normal((rows, cols), dtype=np.float32) * np.float32(std)).astype(np.float32)


@dataclass
class ModeComparison:
    format: MiniFloatFormat
    axis: Axis
    stats: dict[ScaleRoundingMode, QuantStats]

    def saturation_rate(self, mode: ScaleRoundingMode) -> float:
        return self.stats[mode].saturation_rate

    def underflow_rate(self, mode: ScaleRoundingMode) -> float:
        return self.stats[mode].underflow_rate

    def sqnr_db(self, mode: ScaleRoundingMode) -> float | None:
        return self.stats[mode].sqnr_db

    def mse(self, mode: ScaleRoundingMode) -> float:
        return self.stats[mode].mse

    def scale_histogram(self, mode: ScaleRoundingMode) -> dict[int, int]:
        return dict(sorted(self.stats[mode].scale_histogram.items()))


def compare_rounding(tensor, fmt: MiniFloatFormat, axis: Axis = Axis.ROW) -> ModeComparison:
    """Quantize the same tensor under both scale rounding modes."""
    stats = {}
    for mode in ScaleRoundingMode:
        _, stats[mode] = quantize_tensor(tensor, axis, fmt, mode)
    return ModeComparison(fmt, axis, stats)


def dtype_sweep(tensor, axis: Axis, mode: ScaleRoundingMode,
                formats=FORMATS) -> dict[MiniFloatFormat, QuantStats]:
    return {fmt: quantize_tensor(tensor, axis, fmt, mode)[1] for fmt in formats}


def ocp_saturation_predicate(amax, fmt: MiniFloatFormat) -> np.ndarray:
    """True where the OCP floor rule pushes a block amax above destmax.

    With ``amax = 2**A * 1.Ma`` and ``destmax = 2**E * 1.Me`` the floor rule
    maps amax to ``2**E * 1.Ma``, which exceeds destmax iff ``Ma > Me``.
    Blocks whose exponent was clamped at -127 are excluded (returned False
    unless they genuinely exceed).
    """
    a = np.asarray(amax, dtype=np.float32)
    frac, exp = np.frexp(a)
    dest_frac, dest_exp = math.frexp(fmt.destmax)
    unclamped = (exp - dest_exp) >= -127
    return (a > 0) & unclamped & (frac > dest_frac)


def _num(x: float | None) -> float | str | None:
    if x is None:
        return None
    if math.isinf(x):
        return "inf"
    return x


def report_records(entries) -> list[dict]:
    """Flatten ``(mode, format, stats)`` triples into key-value records."""
    return [
        {
            "mode": str(mode),
            "format": fmt.name,
            "saturation_rate": stats.saturation_rate,
            "underflow_rate": stats.underflow_rate,
            "sqnr_db": _num(stats.sqnr_db),
            "n_blocks": stats.n_blocks,
            "below_range_rate": stats.below_range_rate,
            "mse": stats.mse,
            "n_saturated": stats.n_saturated,
        }
        for mode, fmt, stats in entries
    ]


def format_text_report(records: list[dict], header: dict | None = None) -> str:
    lines = [f"# {k}: {v}" for k, v in (header or {}).items()]
    for r in records:
        sqnr = "n/a" if r["sqnr_db"] is None else (
            r["sqnr_db"] if isinstance(r["sqnr_db"], str) else f"{r['sqnr_db']:.3f}")
        lines.append(
            f"mode={r['mode']} format={r['format']} n_blocks={r['n_blocks']} "
            f"saturation_rate={r['saturation_rate']:.6g} underflow_rate={r['underflow_rate']:.6g} "
            f"sqnr_db={sqnr}"
        )
    return "\n".join(lines) + "\n"


def format_kv_report(records: list[dict], header: dict | None = None) -> str:
    return json.dumps({"meta": header or {}, "results": records}, indent=2, sort_keys=True) + "\n"
