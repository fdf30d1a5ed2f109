"""Build script: compiles the Cython hot kernels when a toolchain is present.

The package works without the extension (a numpy fallback is selected at
import time), so compilation failures are demoted to a warning instead of
aborting the install.
"""

import warnings

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/sineseg/_kernels/_native.pyx",
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )
    for ext in ext_modules:
        ext.include_dirs.append(np.get_include())
        ext.define_macros.append(("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION"))
        ext.extra_compile_args.append("-O3")
except Exception as exc:  # pragma: no cover - toolchain-dependent
    warnings.warn(f"Cython kernels not built ({exc}); using numpy fallback")
    ext_modules = []

setup(ext_modules=ext_modules)
