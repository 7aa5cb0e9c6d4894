import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("MOEPTQ_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:  # pure-Python install
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "moeptq._kernels",
                    ["src/moeptq/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: results must match the numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
