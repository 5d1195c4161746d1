import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # no Cython: the pure-Python ranking kernel is used
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension(
            "dgnet.evaluation._rank_cy",
            ["src/dgnet/evaluation/_rank_cy.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
            optional=True,
        )],
        language_level=3,
    )

setup(ext_modules=ext_modules)
