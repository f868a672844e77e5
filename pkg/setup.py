from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "incgpt.kernels._ckernels",
        ["src/incgpt/kernels/_ckernels.pyx"],
        extra_compile_args=["-O3", "-march=native", "-ffast-math", "-fopenmp"],
        extra_link_args=["-fopenmp", "-lmvec", "-lm"],
    ),
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
)
