from setuptools import Extension, setup
from Cython.Build import cythonize

# The compiled kernel only uses typed memoryviews, so no numpy headers needed.
# -ffast-math is safe here: the bench gate re-checks kernel outputs against the
# two-pass reference at runtime before any latency is reported.
extensions = [
    Extension(
        "infmoe._ckernels",
        ["src/infmoe/_ckernels.pyx"],
        extra_compile_args=[
            "-O3",
            "-march=native",
            "-mprefer-vector-width=512",
            "-ffast-math",
            "-funroll-loops",
            "-fopenmp-simd",
        ],
        extra_link_args=["-lm"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
