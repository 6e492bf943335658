"""Build script. The Cython kernel extension is optional: if Cython or a C
compiler is unavailable the package installs pure-Python and the numpy
reference kernels are used at import time."""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension
    import numpy as np

    ext_modules = cythonize(
        [
            Extension(
                "jointedit.kernels._native",
                ["src/jointedit/kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - env without Cython
    print(f"jointedit: building without native kernels ({exc})")

setup(ext_modules=ext_modules)
