"""Build script for the optional Cython kernels.

The package works without the extension; ``selfaug_pbrl.approx.kernels``
falls back to NumPy when ``_ckernels`` cannot be imported.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SELFAUG_PBRL_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "selfaug_pbrl.approx._ckernels",
                    ["src/selfaug_pbrl/approx/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
