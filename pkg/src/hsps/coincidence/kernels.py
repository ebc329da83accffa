"""Backend selection for the counting kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Setting ``HSPS_PURE_PYTHON=1`` forces the numpy path.
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if _ckernels is not None and os.environ.get("HSPS_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def available_backends():
    return sorted(_BACKENDS)


def get_kernels(name=None):
    """Kernel module for ``name`` ("cython" or "python"); default is :data:`BACKEND`."""
    name = BACKEND if name is None else name
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}") from None
