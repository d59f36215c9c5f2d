import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("GATEFUSE_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "gatefuse.numerics._kernels_c",
                ["src/gatefuse/numerics/_kernels_c.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math: masked scores rely on IEEE infinities
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
