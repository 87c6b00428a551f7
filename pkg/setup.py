import os

import numpy
from setuptools import Extension, setup

# The compiled kernels are an optional speedup: the package falls back to
# pure-numpy implementations when the extension is absent.  Set
# PRIORFILL_NO_EXT=1 to skip building it.
ext_modules = []
if os.environ.get("PRIORFILL_NO_EXT") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "priorfill.numerics.kernels._ckernels",
                ["src/priorfill/numerics/kernels/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
