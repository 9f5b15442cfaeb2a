"""Kernel backend selection.

Compiled kernels from ``_kernels`` are used when the extension is importable;
anything it does not provide (or everything, with ``VLCABS_BACKEND=python``)
comes from the numpy fallback ``_kernels_py``.
"""
import os
from types import SimpleNamespace

from . import _kernels_py

KERNELS = ("bilinear_resize", "threshold_counts", "gelu")

_compiled = None
if os.environ.get("VLCABS_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
kernels = SimpleNamespace(**{
    name: getattr(_compiled, name, None) or getattr(_kernels_py, name) for name in KERNELS
})
python_kernels = SimpleNamespace(**{name: getattr(_kernels_py, name) for name in KERNELS})
