"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``PREFACT_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
the backend-equivalence tests).
"""
import os

if os.environ.get("PREFACT_PURE_PYTHON", "") not in ("", "0"):
    from prefact import _kernels_py as kernels
else:
    try:
        from prefact import _kernels as kernels
    except ImportError:
        from prefact import _kernels_py as kernels

BACKEND = kernels.BACKEND
