"""Builds the optional compiled kernel core.

The package works without it (seqgen.kernels falls back to the numpy
reference implementation at import time), so a failed compile only costs
speed, not functionality.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "seqgen.kernels._fast",
                ["src/seqgen/kernels/_fast.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
