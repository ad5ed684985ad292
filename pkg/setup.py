"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); set TCVIO_SKIP_BUILD=1 to install pure-Python only.
"""

import os

from setuptools import Extension, setup

PYX = "src/tcvio/_kernels/_fastcore.pyx"

ext_modules = []
if os.environ.get("TCVIO_SKIP_BUILD", "0") != "1" and os.path.exists(PYX):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "tcvio._kernels._fastcore",
                    [PYX],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
