# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels.

Semantics match chunkkv.kernels._numpy: quantize_groups, pack_codes,
unpack_codes and dequantize_codes are bit-compatible with the numpy
backend (same float64 expression trees, and the build disables FMA
contraction); matmul_packed may differ from BLAS only in accumulation
order.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ALLOWED_BITS = (2, 4)


cdef inline int _check_bits(int bits) except -1:
    if bits != 2 and bits != 4:
        raise ValueError(f"bitwidth must be one of (2, 4), got {bits}")
    return 0


def quantize_groups(x, int bits, Py_ssize_t group_size):
    """Per-group asymmetric min-max codes; see the numpy backend docstring."""
    _check_bits(bits)
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    cdef cnp.ndarray xa = np.ascontiguousarray(x, dtype=np.float64)
    if xa.ndim != 2:
        raise ValueError("expected a 2D matrix")
    cdef Py_ssize_t rows = xa.shape[0]
    cdef Py_ssize_t cols = xa.shape[1]
    cdef Py_ssize_t gpr = (cols + group_size - 1) // group_size
    codes_arr = np.zeros((rows, cols), dtype=np.uint8)
    scales_arr = np.zeros(rows * gpr, dtype=np.float64)
    zps_arr = np.zeros(rows * gpr, dtype=np.float64)
    if rows == 0 or cols == 0:
        return codes_arr, scales_arr, zps_arr

    cdef const double[:, ::1] xv = xa
    cdef unsigned char[:, ::1] cv = codes_arr
    cdef double[::1] sv = scales_arr
    cdef double[::1] zv = zps_arr
    cdef double qmax = <double>((1 << bits) - 1)
    cdef Py_ssize_t r, g, c, c0, c1, gi
    cdef double lo, hi, v, span, t

    for r in range(rows):
        for g in range(gpr):
            c0 = g * group_size
            c1 = c0 + group_size
            if c1 > cols:
                c1 = cols
            lo = xv[r, c0]
            hi = lo
            for c in range(c0 + 1, c1):
                v = xv[r, c]
                if v < lo:
                    lo = v
                if v > hi:
                    hi = v
            gi = r * gpr + g
            span = hi - lo
            sv[gi] = span / qmax
            zv[gi] = lo
            if span > 0.0:
                for c in range(c0, c1):
                    t = floor((xv[r, c] - lo) * qmax / span + 0.5)
                    if t < 0.0:
                        t = 0.0
                    elif t > qmax:
                        t = qmax
                    cv[r, c] = <unsigned char>t
            # constant group: codes stay 0
    return codes_arr, scales_arr, zps_arr


def pack_codes(codes, int bits):
    """Pack codes into little-endian 32-bit words, row-major element order."""
    _check_bits(bits)
    cdef cnp.ndarray ca = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1)
    cdef Py_ssize_t n = ca.shape[0]
    cdef Py_ssize_t n_words = (n * bits + 31) // 32
    out = np.zeros(n_words, dtype=np.uint32)
    if n == 0:
        return out
    cdef const unsigned char[::1] cv = ca
    cdef unsigned int[::1] wv = out
    cdef Py_ssize_t i, bitpos
    for i in range(n):
        bitpos = i * bits
        wv[bitpos >> 5] |= (<unsigned int>cv[i]) << (bitpos & 31)
    return out


def unpack_codes(packed, int bits, Py_ssize_t count):
    """Inverse of pack_codes for the first `count` elements."""
    _check_bits(bits)
    cdef cnp.ndarray pa = np.ascontiguousarray(packed, dtype=np.uint32)
    if count > pa.shape[0] * (32 // bits):
        raise ValueError("count exceeds packed capacity")
    out = np.zeros(count, dtype=np.uint8)
    if count == 0:
        return out
    cdef const unsigned int[::1] pv = pa
    cdef unsigned char[::1] ov = out
    cdef unsigned int mask = (1u << bits) - 1
    cdef Py_ssize_t i, bitpos
    for i in range(count):
        bitpos = i * bits
        ov[i] = <unsigned char>((pv[bitpos >> 5] >> (bitpos & 31)) & mask)
    return out


def dequantize_codes(packed, scales, zero_points, Py_ssize_t rows, Py_ssize_t cols,
                     int bits, Py_ssize_t group_size):
    """Affine reconstruction zero_point[g] + scale[g] * code as float64."""
    _check_bits(bits)
    cdef cnp.ndarray pa = np.ascontiguousarray(packed, dtype=np.uint32)
    cdef cnp.ndarray sa = np.ascontiguousarray(scales, dtype=np.float64)
    cdef cnp.ndarray za = np.ascontiguousarray(zero_points, dtype=np.float64)
    if rows * cols > pa.shape[0] * (32 // bits):
        raise ValueError("count exceeds packed capacity")
    out = np.zeros((rows, cols), dtype=np.float64)
    if rows == 0 or cols == 0:
        return out
    cdef const unsigned int[::1] pv = pa
    cdef const double[::1] sv = sa
    cdef const double[::1] zv = za
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t gpr = (cols + group_size - 1) // group_size
    cdef unsigned int mask = (1u << bits) - 1
    cdef Py_ssize_t r, c, bitpos, gi
    cdef unsigned int code
    for r in range(rows):
        for c in range(cols):
            bitpos = (r * cols + c) * bits
            code = (pv[bitpos >> 5] >> (bitpos & 31)) & mask
            gi = r * gpr + c // group_size
            ov[r, c] = zv[gi] + sv[gi] * <double>code
    return out


def matmul_packed(a, packed, scales, zero_points, Py_ssize_t rows, Py_ssize_t cols,
                  int bits, Py_ssize_t group_size, bint transpose):
    """a @ dequantized (or its transpose), dequantizing on the fly."""
    _check_bits(bits)
    cdef cnp.ndarray aa = np.ascontiguousarray(a, dtype=np.float64)
    if aa.ndim != 2:
        raise ValueError("expected a 2D left factor")
    cdef Py_ssize_t inner = cols if transpose else rows
    if aa.shape[1] != inner:
        raise ValueError(
            f"inner dimension mismatch: a has {aa.shape[1]}, block provides {inner}"
        )
    cdef cnp.ndarray pa = np.ascontiguousarray(packed, dtype=np.uint32)
    cdef cnp.ndarray sa = np.ascontiguousarray(scales, dtype=np.float64)
    cdef cnp.ndarray za = np.ascontiguousarray(zero_points, dtype=np.float64)
    if rows * cols > pa.shape[0] * (32 // bits):
        raise ValueError("count exceeds packed capacity")
    cdef Py_ssize_t m = aa.shape[0]
    cdef Py_ssize_t out_cols = rows if transpose else cols
    out = np.zeros((m, out_cols), dtype=np.float64)
    if m == 0 or rows == 0 or cols == 0:
        return out
    cdef const double[:, ::1] av = aa
    cdef const unsigned int[::1] pv = pa
    cdef const double[::1] sv = sa
    cdef const double[::1] zv = za
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t gpr = (cols + group_size - 1) // group_size
    cdef unsigned int mask = (1u << bits) - 1
    cdef Py_ssize_t r, c, i, bitpos, gi
    cdef unsigned int code
    cdef double v
    for r in range(rows):
        for c in range(cols):
            bitpos = (r * cols + c) * bits
            code = (pv[bitpos >> 5] >> (bitpos & 31)) & mask
            gi = r * gpr + c // group_size
            v = zv[gi] + sv[gi] * <double>code
            if transpose:
                for i in range(m):
                    ov[i, r] += av[i, c] * v
            else:
                for i in range(m):
                    ov[i, c] += av[i, r] * v
    return out
