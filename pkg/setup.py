"""Build script: compiles the optional Cython kernel core.

If the extension cannot be built the package still installs; the numpy
backend is selected at import time instead.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/voxseg/_core.pyx",
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: skipping compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
