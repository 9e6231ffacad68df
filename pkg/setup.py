"""Build script for the optional compiled recurrence kernel.

The package is pure Python plus one Cython extension that fuses the GRU
sequence loop.  If Cython or a C compiler is unavailable the build falls
back to a source-only install; the package then selects the numpy kernel
at import time.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class _OptionalBuildExt(build_ext):
    """Build the extension if possible, warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing or broken toolchain
            warnings.warn(f"compiled kernel skipped: {exc}", stacklevel=1)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"compiled kernel {ext.name} skipped: {exc}", stacklevel=1)


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn(f"compiled kernel skipped: {exc}", stacklevel=1)
        return []
    ext = Extension(
        "protoinfomax._kernels._gru_cy",
        ["src/protoinfomax/_kernels/_gru_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions(), cmdclass={"build_ext": _OptionalBuildExt})
