"""Build script for the compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile is not fatal: we just skip the extension
and carry on. That keeps source installs working on boxes without a C
toolchain.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "chunkkv.kernels._core",
                ["src/chunkkv/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                # fp-contract off: the numpy and compiled backends must agree
                # bit for bit on quantize/dequantize, so no FMA fusion.
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
