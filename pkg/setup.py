import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps the compiled kernels bitwise identical to the numpy fallback
extensions = [
    Extension(
        "disagg._ckernels",
        ["src/disagg/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
