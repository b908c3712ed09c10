"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy twin in ``_pykernels`` is used. Both expose the same functions.
"""
import numpy as np

from posmask import _pykernels

try:
    from posmask import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _ckernels if _ckernels is not None else _pykernels

GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return _active.NAME


def use_backend(name):
    """Switch the process-wide kernel backend ("cython" or "python")."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    _active = _BACKENDS[name]


def get_backend(name=None):
    return _active if name is None else _BACKENDS[name]


def scatter_add_rows(n_rows, idx, src):
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    return _active.scatter_add_rows(n_rows, idx, src)


def betainc_reg(a, b, x):
    return _active.betainc_reg(float(a), float(b), float(x))


def studentized_range_sf(q, k, df):
    return _active.studentized_range_sf(float(q), int(k), float(df), GL_NODES, GL_WEIGHTS)
