import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fallback kernels are used at import time
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("DCPASEG_NO_EXT") != "1":
    extensions = [
        Extension(
            "dcpaseg.kernels._ckernels",
            ["src/dcpaseg/kernels/_ckernels.pyx"],
            depends=["src/dcpaseg/kernels/conv_impl.h", "src/dcpaseg/kernels/conv_kernels.h"],
            include_dirs=[np.get_include(), "src/dcpaseg/kernels"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3", "-march=native", "-mprefer-vector-width=512"],
        )
    ]
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
