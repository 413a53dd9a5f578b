"""Backend selection for the inner loops.

The compiled extension is used when it imports; set ``QNDTRAJ_PURE_PYTHON=1``
to force the pure-Python kernels.  Both expose the same functions.
"""
import os

from . import _pykernels

python = _pykernels

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and not os.environ.get("QNDTRAJ_PURE_PYTHON"):
    active = compiled
    BACKEND = "cython"
else:
    active = _pykernels
    BACKEND = "python"


def get(name=None):
    """Return a kernel module: ``"cython"``, ``"python"`` or the active one."""
    if name is None:
        return active
    if name == "python":
        return _pykernels
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not available")
        return compiled
    raise ValueError(f"unknown backend {name!r}")
