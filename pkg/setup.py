"""Build script: compiles the optional dot-product kernel extension.

The package works without the extension (the numpy backend is the
default), so the build is marked optional and any compiler failure
degrades to the pure-Python install instead of aborting.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext = Extension(
        "ridecloak.kernels._simcore",
        sources=["src/ridecloak/kernels/_simcore.pyx"],
        extra_compile_args=["-O3"],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)
except ImportError:
    # No Cython available: ship pure-Python only.
    ext_modules = []

setup(ext_modules=ext_modules)
