"""Kernel backend selection.

The compiled ``_kernel`` extension is used when it imports; otherwise the
NumPy implementation in ``_kernel_py``.  Set ``DYBM_BACKEND=python`` to force
the fallback (``DYBM_BACKEND=compiled`` makes a missing extension an error).
"""

import os

from . import _kernel_py

_requested = os.environ.get("DYBM_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _kernel_py
else:
    try:
        from . import _kernel as _impl
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _kernel_py

NAME = "compiled" if _impl is not _kernel_py else "python"
run_sequence = _impl.run_sequence


def get_backend(name=None):
    """Return the ``run_sequence`` for ``name`` ('compiled', 'python') or the default."""
    if name is None:
        return run_sequence
    if name == "python":
        return _kernel_py.run_sequence
    if name == "compiled":
        from . import _kernel
        return _kernel.run_sequence
    raise ValueError(f"unknown backend {name!r}")
