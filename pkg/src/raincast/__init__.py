"""Teleconnection-aware monthly rainfall forecasting with graph attention and tail mapping."""
from ._accel import HAVE_NUMBA, USE_NUMBA, backend

__version__ = "0.1.0"
__all__ = ["HAVE_NUMBA", "USE_NUMBA", "backend", "__version__"]
