import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SELECTPROTO_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "selectproto._kernels",
                    ["src/selectproto/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython: the numpy fallback in selectproto._kernels_py is used
        ext_modules = []

setup(ext_modules=ext_modules)
