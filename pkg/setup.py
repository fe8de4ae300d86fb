import numpy
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "portraitnerf._compose_cy",
                ["src/portraitnerf/_compose_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
else:
    # Pure-python fallback in portraitnerf.compositing keeps the package usable.
    extensions = []

setup(ext_modules=extensions)
