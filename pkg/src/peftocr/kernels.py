"""Kernel dispatch.

The compiled extension is used when it imports; otherwise the pure-Python
module is used.  Set ``PEFTOCR_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PEFTOCR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

mix64 = _impl.mix64
splitmix_block = _impl.splitmix_block
edit_ops = _impl.edit_ops

__all__ = ["BACKEND", "mix64", "splitmix_block", "edit_ops"]
