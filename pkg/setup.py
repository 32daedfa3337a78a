"""Build script for the optional compiled kernel core.

The package works without the extension (a NumPy fallback is selected at
import time); set MUSC_NO_EXT=1 to skip compilation entirely.
"""

import os

import setuptools
from setuptools import Extension, setup

# Pre-61 setuptools cannot read [project] metadata from pyproject.toml and
# silently produces a broken wheel; only --no-build-isolation installs can
# reach this state (isolated builds get >=68 from [build-system] requires).
if int(setuptools.__version__.split(".")[0]) < 61:
    raise RuntimeError(
        "building musc requires setuptools>=61, found %s; upgrade setuptools "
        "or drop --no-build-isolation" % setuptools.__version__
    )


def extensions():
    if os.environ.get("MUSC_NO_EXT") == "1":
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "musc.kernels._core",
        sources=["src/musc/kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


# name/version mirror pyproject.toml: setuptools < 61 cannot read [project]
# metadata and would otherwise build an UNKNOWN-0.0.0 wheel.
setup(name="musc", version="0.1.0", ext_modules=extensions())
