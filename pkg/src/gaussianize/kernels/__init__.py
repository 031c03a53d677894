"""Hot loops of the rasterizer, in numba and in plain numpy."""

from .._accel import USE_NUMBA

if USE_NUMBA:
    from . import _numba as impl
else:
    from . import _numpy as impl

__all__ = ["impl", "USE_NUMBA"]
