import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension("fvclust._scan", ["src/fvclust/_scan.pyx"],
              include_dirs=[numpy.get_include()], extra_compile_args=["-O3"]),
]

setup(ext_modules=cythonize(extensions, language_level=3))
