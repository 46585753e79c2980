"""Kernel backend selection.

Two interchangeable kernel modules exist: numba-compiled loops and a pure
numpy fallback. The active one is chosen at import time from the
``RESMAP_BACKEND`` environment variable:

    auto   use numba when importable, else numpy (default)
    numba  require numba, fail loudly if missing
    numpy  force the fallback

All call sites go through :data:`kernels`, so a process uses exactly one
backend. Results agree bit-for-bit between the two (see
tests/test_backend_kernels.py); the choice only affects speed.
"""

from __future__ import annotations

import os

_CHOICE = os.environ.get("RESMAP_BACKEND", "auto").strip().lower()

if _CHOICE not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"RESMAP_BACKEND={_CHOICE!r} is not recognized; use 'auto', 'numba' or 'numpy'"
    )

if _CHOICE == "numpy":
    from . import _kernels_numpy as kernels
elif _CHOICE == "numba":
    from . import _kernels_numba as kernels
else:
    try:
        from . import _kernels_numba as kernels
    except ImportError:
        from . import _kernels_numpy as kernels

BACKEND_NAME: str = kernels.NAME
