"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a pure-Python
twin of every kernel ships in stochmpc._kernels_py); building it just
makes the hot paths faster.  If no C compiler or Cython is available
the build falls back to a pure-Python install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "stochmpc._kernels",
                ["src/stochmpc/_kernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
