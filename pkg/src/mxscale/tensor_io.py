"""MXT container: a fixed 32-byte header followed by a raw or MX payload.

Header layout (little-endian)::

    offset  size  field
    0       4     magic       b"MXT1"
    4       2     version     u16, currently 1
    6       1     kind        u8, 0 = raw binary32, 1 = mx
    7       1     format      u8, 0..4 = E4M3, E5M2, E2M3, E3M2, E2M1; 255 for raw
    8       1     axis        u8, 0 = row, 1 = col; 255 for raw
    9       1     scale_mode  u8, 0 = up, 1 = ocp-floor; 255 for raw
    10      8     rows        u64
    18      8     cols        u64
    26      6     reserved    zero

Raw payload: ``rows * cols`` binary32 values, row-major.
MX payload: the scale bytes (``(rows, ceil(cols/32))`` for row blocking,
``(ceil(rows/32), cols)`` for column blocking, row-major), then ``rows *
cols`` code bytes, row-major, one code per byte with FP6/FP4 codes in the
low bits.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from mxscale.block_quant import BLOCK_SIZE, Axis, MxTensor
from mxscale.errors import (
    BadMagic,
    LengthMismatch,
    MalformedHeader,
    UnsupportedFormat,
    UnsupportedVersion,
)
from mxscale.minifloat import FORMATS
from mxscale.scaling import ScaleRoundingMode

__all__ = ["MAGIC", "VERSION", "HEADER_SIZE", "encode", "decode", "write", "read"]

MAGIC = b"MXT1"
VERSION = 1
HEADER_SIZE = 32
KIND_RAW = 0
KIND_MX = 1
NOT_APPLICABLE = 255

_HEADER = struct.Struct("<4sHBBBBQQ6x")
assert _HEADER.size == HEADER_SIZE

_AXES = (Axis.ROW, Axis.COL)
_MODES = (ScaleRoundingMode.ROUND_UP, ScaleRoundingMode.OCP_FLOOR)


def encode(tensor: np.ndarray | MxTensor) -> bytes:
    if isinstance(tensor, MxTensor):
        if tensor.block_size != BLOCK_SIZE:
            raise ValueError(f"MXT stores only {BLOCK_SIZE}-element blocks")
        header = _HEADER.pack(MAGIC, VERSION, KIND_MX, FORMATS.index(tensor.format),
                              _AXES.index(tensor.axis), _MODES.index(tensor.mode),
                              tensor.rows, tensor.cols)
        return header + tensor.scales.tobytes() + tensor.codes.tobytes()
    t = np.asarray(tensor)
    if t.ndim != 2:
        raise ValueError(f"raw MXT tensors are 2-D, got shape {t.shape}")
    header = _HEADER.pack(MAGIC, VERSION, KIND_RAW, NOT_APPLICABLE, NOT_APPLICABLE,
                          NOT_APPLICABLE, t.shape[0], t.shape[1])
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def _field_index(value: int, choices, field: str, exc=MalformedHeader):
    if value >= len(choices):
        raise exc(field, f"value {value} out of range 0..{len(choices) - 1}")
    return choices[value]


def decode(data: bytes) -> np.ndarray | MxTensor:
    if len(data) < HEADER_SIZE:
        raise LengthMismatch("header", f"need {HEADER_SIZE} bytes, file has {len(data)}")
    magic, version, kind, fmt_id, axis_id, mode_id, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion("version", f"unsupported version {version}")
    if any(data[26:HEADER_SIZE]):
        raise MalformedHeader("reserved", "reserved bytes must be zero")
    payload = memoryview(data)[HEADER_SIZE:]

    if kind == KIND_RAW:
        for name, value in (("format", fmt_id), ("axis", axis_id), ("scale_mode", mode_id)):
            if value != NOT_APPLICABLE:
                raise MalformedHeader(name, f"must be {NOT_APPLICABLE} for raw tensors, got {value}")
        expected = rows * cols * 4
        if len(payload) != expected:
            raise LengthMismatch("payload", f"raw {rows}x{cols} needs {expected} bytes, got {len(payload)}")
        return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(rows, cols)

    if kind != KIND_MX:
        raise MalformedHeader("kind", f"unknown kind {kind}")
    fmt = _field_index(fmt_id, FORMATS, "format", UnsupportedFormat)
    axis = _field_index(axis_id, _AXES, "axis")
    mode = _field_index(mode_id, _MODES, "scale_mode")
    if rows == 0 or cols == 0:
        raise MalformedHeader("rows" if rows == 0 else "cols", "dimension must be positive")
    nb = -(-(cols if axis is Axis.ROW else rows) // BLOCK_SIZE)
    scale_shape = (rows, nb) if axis is Axis.ROW else (nb, cols)
    n_scales = scale_shape[0] * scale_shape[1]
    expected = n_scales + rows * cols
    if len(payload) != expected:
        raise LengthMismatch("payload", f"mx {rows}x{cols} needs {expected} bytes, got {len(payload)}")
    scales = np.frombuffer(payload[:n_scales], dtype=np.uint8).reshape(scale_shape).copy()
    codes = np.frombuffer(payload[n_scales:], dtype=np.uint8).reshape(rows, cols).copy()
    if codes.size and int(codes.max()) >= 1 << fmt.width:
        raise MalformedHeader("codes", f"code exceeds {fmt.width} bits for {fmt.name}")
    return MxTensor(rows, cols, axis, fmt, codes, scales, mode)


def write(path: str | os.PathLike, tensor: np.ndarray | MxTensor) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensor))


def read(path: str | os.PathLike) -> np.ndarray | MxTensor:
    with open(path, "rb") as fh:
        return decode(fh.read())
