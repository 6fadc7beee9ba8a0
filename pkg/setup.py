"""Build script: compiles the optional fast kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so any failure here is downgraded to a warning. Set
DICETAB_NO_EXT=1 to skip the compilation attempt entirely.
"""

import os
import sys

from setuptools import setup

ext_modules = []
if not os.environ.get("DICETAB_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "dicetab._kernels._fastloops",
            ["src/dicetab/_kernels/_fastloops.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], language_level="3")
    except Exception as exc:  # noqa: BLE001 - any build-env problem means "no ext"
        print(f"dicetab: skipping fast kernels ({exc}); numpy fallback will be used",
              file=sys.stderr)

setup(ext_modules=ext_modules)
