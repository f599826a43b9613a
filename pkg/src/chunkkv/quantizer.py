"""Per-group asymmetric min-max quantization to 2 or 4 bits.

A QuantizedBlock stores one matrix as bit-packed integer codes plus
per-group affine metadata (scale, zero point). Groups run along the
column axis within each row; dequantization is
zero_point[g] + scale[g] * code. fqm multiplies a float matrix against a
block without requiring the caller to materialize the dequantized matrix.
"""

from dataclasses import dataclass
import struct

import numpy as np

from chunkkv import kernels

_HEADER = struct.Struct("<4I")


@dataclass(frozen=True)
class QuantizedBlock:
    """Bit-packed integer matrix with per-group scale/zero-point metadata.

    packed holds row-major codes in little-endian 32-bit words. scales and
    zero_points are float64 with one entry per group,
    rows * ceil(cols / group_size) in total. scale is 0 only for constant
    groups, whose codes are all 0 and whose zero_point carries the value.
    """

    rows: int
    cols: int
    bitwidth: int
    group_size: int
    packed: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray

    def __post_init__(self):
        if self.bitwidth not in kernels.ALLOWED_BITS:
            raise ValueError(f"bitwidth must be one of {kernels.ALLOWED_BITS}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.rows < 0 or self.cols < 0:
            raise ValueError("negative shape")
        n_words = -(-self.rows * self.cols * self.bitwidth // 32)
        if self.packed.shape != (n_words,):
            raise ValueError("packed length does not match shape")
        if self.scales.shape != (self.n_groups,) or self.zero_points.shape != (self.n_groups,):
            raise ValueError("metadata length does not match group count")

    @property
    def n_groups(self) -> int:
        return self.rows * (-(-self.cols // self.group_size))

    def storage_bytes(self) -> int:
        """Bytes held by packed words plus per-group metadata."""
        return self.packed.nbytes + self.scales.nbytes + self.zero_points.nbytes


def quantize(matrix, bitwidth, group_size=32) -> QuantizedBlock:
    """Quantize a float matrix to a QuantizedBlock.

    Per group with value range [m, M]: scale = (M - m) / (2**bitwidth - 1),
    zero_point = m, code = round-half-up((x - m) / scale) clamped to the
    code range. Constant groups take scale 0 and all-zero codes. Raises
    ValueError on non-finite input.
    """
    arr = np.ascontiguousarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2D matrix")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError("matrix contains non-finite values")
    codes, scales, zero_points = kernels.quantize_groups(arr, bitwidth, group_size)
    packed = kernels.pack_codes(codes.reshape(-1), bitwidth)
    return QuantizedBlock(
        rows=arr.shape[0],
        cols=arr.shape[1],
        bitwidth=bitwidth,
        group_size=group_size,
        packed=packed,
        scales=scales,
        zero_points=zero_points,
    )


def dequantize(block: QuantizedBlock) -> np.ndarray:
    """Reconstruct the float64 matrix scales[g] * code + zero_points[g]."""
    return kernels.dequantize_codes(
        block.packed,
        block.scales,
        block.zero_points,
        block.rows,
        block.cols,
        block.bitwidth,
        block.group_size,
    )


def fqm(a, block: QuantizedBlock, transpose_block=False) -> np.ndarray:
    """Multiply float matrix a against a quantized block.

    Equals a @ dequantize(block) (or its transpose) up to accumulation
    order; float64 accumulation throughout.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2D left factor")
    inner = block.cols if transpose_block else block.rows
    if a.shape[1] != inner:
        raise ValueError(
            f"inner dimension mismatch: a has {a.shape[1]}, block provides {inner}"
        )
    return kernels.matmul_packed(
        a,
        block.packed,
        block.scales,
        block.zero_points,
        block.rows,
        block.cols,
        block.bitwidth,
        block.group_size,
        bool(transpose_block),
    )


def serialize_block(block: QuantizedBlock) -> bytes:
    """Binary form: u32 header (rows, cols, bitwidth, group_size), then
    scales and zero_points as little-endian float64, then packed words as
    little-endian u32. Round-trips bit-exactly."""
    header = _HEADER.pack(block.rows, block.cols, block.bitwidth, block.group_size)
    return b"".join(
        (
            header,
            np.ascontiguousarray(block.scales, dtype="<f8").tobytes(),
            np.ascontiguousarray(block.zero_points, dtype="<f8").tobytes(),
            np.ascontiguousarray(block.packed, dtype="<u4").tobytes(),
        )
    )


def deserialize_block(buf, offset=0):
    """Parse one block starting at `offset`; returns (block, next_offset)."""
    end = offset + _HEADER.size
    if end > len(buf):
        raise ValueError("truncated block header")
    rows, cols, bitwidth, group_size = _HEADER.unpack_from(buf, offset)
    if bitwidth not in kernels.ALLOWED_BITS:
        raise ValueError(f"bad bitwidth {bitwidth} in block header")
    if group_size < 1:
        raise ValueError("bad group_size in block header")
    n_groups = rows * (-(-cols // group_size))
    n_words = -(-rows * cols * bitwidth // 32)
    need = n_groups * 8 * 2 + n_words * 4
    if end + need > len(buf):
        raise ValueError("truncated block body")
    scales = np.frombuffer(buf, dtype="<f8", count=n_groups, offset=end).astype(np.float64)
    end += n_groups * 8
    zero_points = np.frombuffer(buf, dtype="<f8", count=n_groups, offset=end).astype(np.float64)
    end += n_groups * 8
    packed = np.frombuffer(buf, dtype="<u4", count=n_words, offset=end).astype(np.uint32)
    end += n_words * 4
    block = QuantizedBlock(
        rows=rows,
        cols=cols,
        bitwidth=bitwidth,
        group_size=group_size,
        packed=packed,
        scales=scales,
        zero_points=zero_points,
    )
    return block, end
