"""Kernel backend selection.

The compiled extension is preferred when present; the numpy implementation
is the fallback. Set CHUNKKV_KERNELS=numpy or CHUNKKV_KERNELS=compiled to
force one side (forcing `compiled` on a box without the built extension is
an error rather than a silent downgrade).
"""

import os

_requested = os.environ.get("CHUNKKV_KERNELS", "").strip().lower()

if _requested not in ("", "numpy", "compiled"):
    raise RuntimeError(
        f"CHUNKKV_KERNELS must be 'numpy' or 'compiled', got {_requested!r}"
    )

if _requested == "numpy":
    from chunkkv.kernels import _numpy as _impl

    BACKEND = "numpy"
elif _requested == "compiled":
    try:
        from chunkkv.kernels import _core as _impl
    except ImportError as exc:
        raise RuntimeError(
            "CHUNKKV_KERNELS=compiled but the extension is not built; "
            "reinstall the package or unset the variable"
        ) from exc
    BACKEND = "compiled"
else:
    try:
        from chunkkv.kernels import _core as _impl

        BACKEND = "compiled"
    except ImportError:
        from chunkkv.kernels import _numpy as _impl

        BACKEND = "numpy"

ALLOWED_BITS = (2, 4)

quantize_groups = _impl.quantize_groups
pack_codes = _impl.pack_codes
unpack_codes = _impl.unpack_codes
dequantize_codes = _impl.dequantize_codes
matmul_packed = _impl.matmul_packed

__all__ = [
    "ALLOWED_BITS",
    "BACKEND",
    "dequantize_codes",
    "matmul_packed",
    "pack_codes",
    "quantize_groups",
    "unpack_codes",
]
