import os
from functools import wraps

import numpy as np

from .errors import NumericalError

_debug = os.environ.get("DENSECOUNT_DEBUG", "") not in ("", "0")


def set_debug(enabled):
    """Enable or disable finite-value checks on every tensor operation.

    Debug mode can also be switched on with the ``DENSECOUNT_DEBUG=1``
    environment variable.
    """
    global _debug
    _debug = bool(enabled)


def debug_enabled():
    return _debug


def _iter_arrays(value):
    if isinstance(value, np.ndarray):
        yield value
    elif isinstance(value, (tuple, list)):
        for item in value:
            yield from _iter_arrays(item)


def check_finite(func):
    """Check the array outputs of an operation for non-finite values.

    The check only runs in debug mode and only when all array inputs are finite,
    so it reports values produced by the operation itself.
    """

    @wraps(func)
    def wrapped(*args, **kwargs):
        result = func(*args, **kwargs)
        if not _debug:
            return result
        inputs = list(_iter_arrays(list(args) + list(kwargs.values())))
        if not all(np.isfinite(arr).all() for arr in inputs):
            return result
        for arr in _iter_arrays(result):
            if arr.dtype.kind == "f" and not np.isfinite(arr).all():
                raise NumericalError(
                    f"'{func.__name__}' produced non-finite values from finite inputs"
                )
        return result

    return wrapped


def multithreading_enabled(func):
    """Freeze the parameter arrays of a ``ModelParams`` argument while ``func`` runs.

    Parameters are shared read-only between threads during inference; setting the
    writeable flag to False turns any accidental in-place update into an error.
    The previous flags are restored afterwards.
    """

    @wraps(func)
    def wrapped(*args, **kwargs):
        arrays = [
            arr
            for arg in list(args) + list(kwargs.values())
            if hasattr(arg, "arrays")
            for arr in arg.arrays()
        ]
        old_flags = [arr.flags.writeable for arr in arrays]
        try:
            for arr in arrays:
                arr.flags.writeable = False
            return func(*args, **kwargs)
        finally:
            for arr, old_flag in zip(arrays, old_flags):
                arr.flags.writeable = old_flag

    return wrapped
