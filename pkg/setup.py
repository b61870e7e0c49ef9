"""Build script: compiles the optional kernel extension.

The package works without the extension (numpy fallback is selected at
import time), so the extension is marked optional and a failed compile
only degrades performance.
"""

from setuptools import Extension, setup


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "blocklm._ckernels",
        sources=["src/blocklm/_ckernels.pyx"],
        extra_compile_args=["-O3"],
        optional=True,
    )
    return cythonize([ext], language_level="3")


setup(ext_modules=extensions())
