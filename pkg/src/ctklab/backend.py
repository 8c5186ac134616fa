"""Selects the numerical backend for the hot kernels.

The numba backend is used when importable; set CTKLAB_DISABLE_NUMBA=1
(or NUMBA_DISABLE_JIT=1) before import to force the pure-numpy path.
Both backends implement the same functions and agree to float64
rounding; results are deterministic within a fixed backend.
"""

from __future__ import annotations

import os


def _numba_disabled() -> bool:
    for var in ("CTKLAB_DISABLE_NUMBA", "NUMBA_DISABLE_JIT"):
        if os.environ.get(var, "").strip() not in ("", "0"):
            return True
    return False


if _numba_disabled():
    from ctklab import _kernels_numpy as kernels
else:
    try:
        from ctklab import _kernels_numba as kernels  # type: ignore[no-redef]
    except ImportError:
        from ctklab import _kernels_numpy as kernels  # type: ignore[no-redef]


def backend_name() -> str:
    """Name of the active kernel backend ("numba" or "numpy")."""
    return kernels.BACKEND
