"""Build script: compiles the optional BPE fast path.

The package is fully functional without the extension (a pure-Python
fallback is selected at import time); set GENOJEPA_PURE_PYTHON=1 to skip
compilation entirely.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("GENOJEPA_PURE_PYTHON") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "genojepa._bpe_core",
                    ["src/genojepa/_bpe_core.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
