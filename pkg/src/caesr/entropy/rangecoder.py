"""Range coder front end: the compiled kernel when built, else pure Python.

Set ``CAESR_PURE_PYTHON=1`` to force the fallback.
"""
import os

from ._rangecoder_py import BOT, PRECISION, TOP, TOTAL, RangeDecodeError
from . import _rangecoder_py as python_backend

compiled_backend = None
if not os.environ.get("CAESR_PURE_PYTHON"):
    try:
        from . import _rangecoder_ext as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "cython" if compiled_backend is not None else "python"
RangeEncoder = _active.RangeEncoder
RangeDecoder = _active.RangeDecoder

__all__ = ["RangeEncoder", "RangeDecoder", "RangeDecodeError", "BACKEND",
           "PRECISION", "TOTAL", "TOP", "BOT", "python_backend", "compiled_backend"]
