"""Build script: compiles the tied-event likelihood kernel when Cython and a
C compiler are available.  The extension is optional; the package falls back
to the numpy kernel at import time if the compiled module is absent."""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FEDCOX_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext = Extension(
            "fedcox._efron_cy",
            ["src/fedcox/_efron_cy.pyx"],
            include_dirs=[numpy.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
            optional=True,
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        pass

setup(ext_modules=ext_modules)
