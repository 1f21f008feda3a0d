from .._accel import USE_NUMBA
from . import linear_sde, mlp

__all__ = ["USE_NUMBA", "linear_sde", "mlp"]
