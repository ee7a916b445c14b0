"""Build script for the compiled scan kernels.

The selective-scan recurrence is the only part of the model that cannot be
vectorized over time, so it gets a Cython extension. If Cython or a C
compiler is unavailable the package still installs and falls back to the
numpy implementation in proprio.kernels.scan_py (selected at import).
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "proprio.kernels._scan",
                sources=["src/proprio/kernels/_scan.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
