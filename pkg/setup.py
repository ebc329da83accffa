import os
import sys

import numpy
from setuptools import Extension, setup

# HSPS_NO_EXT=1 builds a pure-Python install; the package falls back to the
# numpy kernels at import time.
ext_modules = []
if not os.environ.get("HSPS_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("Cython not available, building without compiled kernels", file=sys.stderr)
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "hsps.coincidence._ckernels",
                    ["src/hsps/coincidence/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": 3},
        )

setup(ext_modules=ext_modules)
