"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a numpy fallback is selected at
import time), so a failed extension build downgrades to a pure-Python
install instead of aborting.
"""

import sys

from setuptools import setup


def _extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "heatnet.kernels._core",
        ["src/heatnet/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


try:
    setup(ext_modules=_extensions())
except SystemExit:
    raise
except Exception as exc:  # compiler missing, cythonize failure, ...
    print(f"extension build failed ({exc}); installing pure-Python fallback", file=sys.stderr)
    setup(ext_modules=[])
