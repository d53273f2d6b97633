import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy fallback is used when the extension is absent
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("SVN_ENSEMBLES_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "svn_ensembles._core",
                ["src/svn_ensembles/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
