"""Build the optional Cython range-coder kernel.

If Cython or a C compiler is unavailable the package still installs and the
pure-Python coder in ``caesr.entropy._rangecoder_py`` is used instead.
"""
import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled range coder not built ({exc}); "
                  "falling back to pure Python", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: building {ext.name} failed ({exc})", file=sys.stderr)


ext_modules = []
if not os.environ.get("CAESR_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("caesr.entropy._rangecoder_ext",
                       sources=["src/caesr/entropy/_rangecoder_ext.pyx"],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3",
                                 "boundscheck": False,
                                 "wraparound": False,
                                 "cdivision": True},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
