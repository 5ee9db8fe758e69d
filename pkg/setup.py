"""Build script for the compiled kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time), so build failures here should not be fatal to `pip install`
users who cannot compile: run with METRICOPT_SKIP_EXT=1 to install the pure
Python package.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("METRICOPT_SKIP_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/metricopt/_kernels/_core.pyx",
        language_level="3",
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
    for ext in ext_modules:
        ext.extra_compile_args = ["-O3"]

setup(ext_modules=ext_modules)
