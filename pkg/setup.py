import os

import numpy as np
from setuptools import Extension, setup

# Set RELAMIX_NO_EXT=1 to install the pure-Python build only.
ext_modules = []
if not os.environ.get("RELAMIX_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "relamix._kernels",
                ["src/relamix/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # fixed accumulation order: no FMA contraction
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
