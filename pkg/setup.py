"""Build the optional compiled kernel core.

If Cython or a C compiler is unavailable the package still installs and
falls back to the numpy kernels at import time.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("PFGUIDE_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "pfguide._core._kernels",
                    ["src/pfguide/_core/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except Exception as exc:  # pragma: no cover - build environment dependent
        print(f"pfguide: skipping compiled kernels ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
