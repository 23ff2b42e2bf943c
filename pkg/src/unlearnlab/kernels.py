"""Backend selection for the scalar kernels.

The compiled ``_kernels`` extension is used when importable; otherwise the
pure-Python twin. Set ``UNLEARNLAB_PURE=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

INV_E = _kernels_py.INV_E

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("UNLEARNLAB_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def get_backend(name=None):
    """Return a kernel module by name ("cython" or "python"), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def lambert_w(x):
    """Principal branch W0 of the Lambert W function for real ``x >= -1/e``.

    Starts from a branch-point series near ``-1/e``, ``log1p(x)`` for moderate
    ``x`` and the asymptotic ``log x - log log x`` above 3, then Halley steps.
    """
    x = float(x)
    if not x >= -INV_E:
        raise ValueError(f"lambert_w requires x >= -1/e, got {x!r}")
    if x == float("inf"):
        return x
    return _impl.lambert_w(x)


def lambert_w_array(xs):
    xs = np.ascontiguousarray(xs, dtype=np.float64).ravel()
    if xs.size and not np.all(xs >= -INV_E):
        raise ValueError("lambert_w requires x >= -1/e")
    return _impl.lambert_w_array(xs)


def superloss_weight(loss, tau, sl_lambda):
    if not sl_lambda > 0:
        raise ValueError(f"sl_lambda must be positive, got {sl_lambda!r}")
    return _impl.superloss_weight(float(loss), float(tau), float(sl_lambda))


def superloss_weights(losses, tau, sl_lambda):
    if not sl_lambda > 0:
        raise ValueError(f"sl_lambda must be positive, got {sl_lambda!r}")
    losses = np.ascontiguousarray(losses, dtype=np.float64).ravel()
    return _impl.superloss_weights(losses, float(tau), float(sl_lambda))


def threshold_sweep(member_losses, nonmember_losses):
    """Best "loss below threshold means member" cut by balanced accuracy.

    Returns ``(lo, hi, balanced_accuracy)`` where any threshold in ``(lo, hi]``
    realises the optimum. Ties go to the lowest cut.
    """
    m = np.asarray(member_losses, dtype=np.float64).ravel()
    u = np.asarray(nonmember_losses, dtype=np.float64).ravel()
    values = np.concatenate([m, u])
    flags = np.concatenate([np.ones(m.size, np.int8), np.zeros(u.size, np.int8)])
    order = np.argsort(values, kind="mergesort")
    values = np.ascontiguousarray(values[order])
    flags = np.ascontiguousarray(flags[order])
    lo, hi, score = _impl.threshold_sweep(values, flags, m.size, u.size)
    return lo, hi, score / (2.0 * m.size * u.size)
