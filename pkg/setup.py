"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes the hot kernels faster. Compilation
tries aggressive flags first (vectorized libm via -ffast-math needs
libmvec) and falls back to plainer ones if the toolchain refuses.
"""

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

FLAG_SETS = [
    (["-O3", "-ffast-math", "-march=native"], ["-lmvec"]),
    (["-O3", "-ffast-math"], ["-lmvec"]),
    (["-O3"], []),
    ([], []),
]


class FlexibleBuildExt(build_ext):
    def build_extension(self, ext):
        last_error = None
        for compile_args, link_args in FLAG_SETS:
            ext.extra_compile_args = compile_args
            ext.extra_link_args = link_args
            try:
                super().build_extension(ext)
                return
            except Exception as exc:  # try the next, plainer flag set
                last_error = exc
        raise last_error


ext_modules = []
cmdclass = {}
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "diffrec.kernels._ext",
                ["src/diffrec/kernels/_ext.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
    cmdclass["build_ext"] = FlexibleBuildExt

setup(ext_modules=ext_modules, cmdclass=cmdclass)
