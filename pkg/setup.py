import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# No -ffast-math: summation order inside the kernels is part of the
# determinism contract and must not be reassociated by the compiler.
extensions = [
    Extension(
        "derain.kernels._cykernels",
        ["src/derain/kernels/_cykernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-march=native"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
