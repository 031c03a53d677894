"""Kernel backend selection.

Set ``GAUSSIANIZE_DISABLE_NUMBA=1`` to route every hot kernel through its
pure-numpy implementation. The flag is read once at import time.
"""

import os
import warnings

_FLAG = os.environ.get("GAUSSIANIZE_DISABLE_NUMBA", "").strip().lower()

# old system TBB builds make numba warn on every first parallel launch
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or an identity decorator without numba."""
    if not NUMBA_AVAILABLE:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
