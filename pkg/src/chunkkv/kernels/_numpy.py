"""Array-based kernels, used when the compiled extension is unavailable.

The compiled backend must agree with quantize_groups, pack_codes and
unpack_codes bit for bit (caches serialized on one backend must be byte
identical on the other). matmul_packed may differ by accumulation order
only.
"""

import numpy as np

ALLOWED_BITS = (2, 4)


def _check_bits(bits):
    if bits not in ALLOWED_BITS:
        raise ValueError(f"bitwidth must be one of {ALLOWED_BITS}, got {bits}")


def _group_lengths(cols, group_size):
    # Column-group lengths within one row; the last group may be ragged.
    n_groups = -(-cols // group_size)
    lengths = np.full(n_groups, group_size, dtype=np.int64)
    lengths[-1] = cols - (n_groups - 1) * group_size
    return lengths


def quantize_groups(x, bits, group_size):
    """Per-group asymmetric min-max codes for a 2D float64 matrix.

    Groups run along the column axis within each row. Returns
    (codes, scales, zero_points): codes is uint8 in [0, 2**bits - 1],
    the metadata arrays are float64 of length rows * ceil(cols/group_size).
    A constant group gets scale 0 and all-zero codes; its zero_point
    carries the value.
    """
    _check_bits(bits)
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    x = np.ascontiguousarray(x, dtype=np.float64)
    rows, cols = x.shape
    qmax = float(2**bits - 1)
    lengths = _group_lengths(cols, group_size)
    n_groups = lengths.shape[0]
    if rows == 0:
        return (
            np.zeros((0, cols), dtype=np.uint8),
            np.zeros(0, dtype=np.float64),
            np.zeros(0, dtype=np.float64),
        )
    starts = np.arange(n_groups, dtype=np.int64) * group_size
    mins = np.minimum.reduceat(x, starts, axis=1)
    maxs = np.maximum.reduceat(x, starts, axis=1)
    span = maxs - mins

    m = np.repeat(mins, lengths, axis=1)
    r = np.repeat(span, lengths, axis=1)
    live = r > 0.0
    safe = np.where(live, r, 1.0)
    # Multiply before dividing: (x - m) * qmax / (M - m). The compiled
    # backend evaluates the same expression tree, keeping codes identical.
    codes = np.floor((x - m) * qmax / safe + 0.5)
    np.clip(codes, 0.0, qmax, out=codes)
    codes = np.where(live, codes, 0.0).astype(np.uint8)

    scales = (span / qmax).reshape(-1)
    zero_points = mins.reshape(-1)
    return codes, scales, zero_points


def pack_codes(codes, bits):
    """Pack codes into little-endian 32-bit words, row-major element order.

    Element i occupies bits [i*bits, (i+1)*bits) counted from bit 0 of
    word i*bits // 32; codes never straddle words because 32 % bits == 0.
    Unused trailing bits in the last word are zero.
    """
    _check_bits(bits)
    codes = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1)
    n = codes.shape[0]
    per_word = 32 // bits
    n_words = -(-n * bits // 32)
    padded = np.zeros(n_words * per_word, dtype=np.uint32)
    padded[:n] = codes
    shifts = np.arange(per_word, dtype=np.uint32) * np.uint32(bits)
    words = np.bitwise_or.reduce(padded.reshape(n_words, per_word) << shifts, axis=1)
    return words.astype(np.uint32, copy=False)


def unpack_codes(packed, bits, count):
    """Inverse of pack_codes for the first `count` elements."""
    _check_bits(bits)
    packed = np.ascontiguousarray(packed, dtype=np.uint32)
    per_word = 32 // bits
    if count > packed.shape[0] * per_word:
        raise ValueError("count exceeds packed capacity")
    shifts = np.arange(per_word, dtype=np.uint32) * np.uint32(bits)
    mask = np.uint32((1 << bits) - 1)
    codes = ((packed[:, None] >> shifts) & mask).astype(np.uint8)
    return codes.reshape(-1)[:count]


def dequantize_codes(packed, scales, zero_points, rows, cols, bits, group_size):
    """Affine reconstruction zero_point[g] + scale[g] * code as float64."""
    codes = unpack_codes(packed, bits, rows * cols).reshape(rows, cols)
    codes = codes.astype(np.float64)
    lengths = _group_lengths(cols, group_size)
    n_groups = lengths.shape[0]
    scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(rows, n_groups)
    zero_points = np.ascontiguousarray(zero_points, dtype=np.float64).reshape(rows, n_groups)
    s = np.repeat(scales, lengths, axis=1)
    z = np.repeat(zero_points, lengths, axis=1)
    return z + s * codes


def matmul_packed(a, packed, scales, zero_points, rows, cols, bits, group_size, transpose):
    """a @ dequantized (or its transpose), float64 accumulation."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    inner = cols if transpose else rows
    if a.ndim != 2 or a.shape[1] != inner:
        raise ValueError(
            f"inner dimension mismatch: a has {a.shape[1] if a.ndim == 2 else '?'}, "
            f"block provides {inner}"
        )
    deq = dequantize_codes(packed, scales, zero_points, rows, cols, bits, group_size)
    return a @ (deq.T if transpose else deq)
