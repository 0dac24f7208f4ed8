"""Builds the optional Cython kernels.

If Cython or a C compiler is missing the package still installs and runs on
the pure-Python kernels. Set ``LATENT_INTERVALS_NO_EXT=1`` to skip the build.
"""

import os
import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as e:  # noqa: BLE001
            warnings.warn(f"compiled kernels not built, using pure-Python fallback: {e}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as e:  # noqa: BLE001
            warnings.warn(f"failed to build {ext.name}, using pure-Python fallback: {e}")


def extensions():
    if os.environ.get("LATENT_INTERVALS_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "latent_intervals._kernels",
        ["src/latent_intervals/_kernels.pyx"],
        # no contraction into FMA: keeps results identical to the numpy twin
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"}, quiet=True)


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
