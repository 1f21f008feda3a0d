"""Numba switch.

Set ``DIFFTD_NUMBA=0`` to run the pure-numpy kernels and skip importing numba.
"""

import os

_OFF = {"0", "false", "no", "off"}

try:
    if os.environ.get("DIFFTD_NUMBA", "1").strip().lower() in _OFF:
        raise ImportError
    import numba
except ImportError:
    numba = None

USE_NUMBA = numba is not None


def njit(f=None, **options):
    """``numba.njit(cache=True)`` when numba is active, identity otherwise."""
    options.setdefault("cache", True)
    if numba is None:
        if f is None:
            return lambda g: g
        return f
    if f is None:
        return lambda g: numba.njit(g, **options)
    return numba.njit(f, **options)


def pick(fast, fallback):
    return fast if USE_NUMBA else fallback


def pick_by_batch(fast, fallback, max_batch, batch_arg=2):
    """Use ``fast`` while the batch (leading axis of positional argument
    ``batch_arg``) has at most ``max_batch`` rows, ``fallback`` above that.

    Per-sample compiled loops beat BLAS only on tiny batches; the crossover is
    measured by ``benchmarks/bench_kernels.py``.
    """
    if not USE_NUMBA:
        return fallback

    def dispatch(*args):
        impl = fast if args[batch_arg].shape[0] <= max_batch else fallback
        return impl(*args)

    dispatch.fast, dispatch.fallback, dispatch.max_batch = fast, fallback, max_batch
    return dispatch
