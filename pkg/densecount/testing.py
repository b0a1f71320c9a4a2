from functools import partial

import numpy as np

__all__ = ["assert_density_equal"]


def _as_maps(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return x, y


def assert_density_equal(
    x,
    y,
    atol=1e-9,
    rtol=0.0,
    check_mass=True,
    mass_tolerance=None,
    err_msg="",
    verbose=True,
):
    """Raises an AssertionError if two density maps are not equal.

    The maps must have the same shape, nonfinite values in the same places
    and elementwise differences within ``atol + rtol * |y|``. With
    ``check_mass`` the totals are compared as well, which reports a lost
    or duplicated stamp even when every pixel is within tolerance.

    Parameters
    ----------
    x, y : array_like
        Density maps of any matching shape.
    atol, rtol : float
        Absolute and relative elementwise tolerance.
    check_mass : bool, default True
        Whether to compare ``x.sum()`` and ``y.sum()``.
    mass_tolerance : float, optional
        Tolerance of the mass comparison. Defaults to ``atol * x.size``.
    err_msg : str, optional
        The error message to be printed in case of failure.
    verbose : bool, optional
        If True, the conflicting values are appended to the error message.

    Examples
    --------
    >>> assert_density_equal([[0.25, 0.75]], [[0.25, 0.75]])
    """
    __tracebackhide__ = True  # Hide traceback for py.test
    x, y = _as_maps(x, y)

    def fail(detail):
        __tracebackhide__ = True
        raise AssertionError(build_err_msg([x, y], err_msg + detail, verbose=verbose))

    if x.shape != y.shape:
        fail(f"\n(shapes {x.shape}, {y.shape} mismatch)")

    x_bad = ~np.isfinite(x)
    y_bad = ~np.isfinite(y)
    if not (x_bad == y_bad).all():
        fail("\nx and y nonfinite location mismatch:")

    finite = ~x_bad
    diff = np.abs(x[finite] - y[finite])
    allowed = atol + rtol * np.abs(y[finite])
    if np.any(diff > allowed):
        worst = float(diff.max())
        fail(
            f"\nNot equal to tolerance atol={atol:g}, rtol={rtol:g} "
            f"(max abs difference {worst:g}, {int((diff > allowed).sum())} values)"
        )

    if check_mass:
        if mass_tolerance is None:
            mass_tolerance = atol * max(x.size, 1)
        x_mass = float(x[finite].sum())
        y_mass = float(y[finite].sum())
        if abs(x_mass - y_mass) > mass_tolerance:
            fail(f"\nMass {x_mass!r} != {y_mass!r} (tolerance {mass_tolerance:g})")


# adapted from numpy.testing._private.utils


def build_err_msg(
    arrays,
    err_msg,
    header="Density maps are not equal:",
    verbose=True,
    names=("x", "y"),
    precision=8,
):
    msg = ["\n" + header]
    if err_msg:
        if err_msg.find("\n") == -1 and len(err_msg) < 79 - len(header):
            msg = [msg[0] + " " + err_msg]
        else:
            msg.append(err_msg)
    if verbose:
        for name, a in zip(names, arrays):
            r_func = partial(np.array_repr, precision=precision)
            try:
                r = r_func(a)
            except Exception as exc:
                r = f"[repr failed for <{type(a).__name__}>: {exc}]"
            if r.count("\n") > 3:
                r = "\n".join(r.splitlines()[:3])
                r += "..."
            msg.append(f" {name}: {r}")
    return "\n".join(msg)
