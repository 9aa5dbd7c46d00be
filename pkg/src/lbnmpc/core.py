"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
reference kernels are used. Set ``LBNMPC_PURE_PYTHON=1`` to force the
fallback (the test-suite runs both).
"""

import os

from . import _core_py
from ._core_py import (  # noqa: F401  (layout constants re-exported)
    GP_SLOTS,
    KIND_GP,
    KIND_NOMINAL,
    NGP,
    NU,
    NX,
    S_DOT_MIN,
    spatial_rhs,
)


def load_backend(name=None):
    """Return the kernel module called ``name`` ('compiled' or 'python')."""
    if name is None:
        name = "python" if os.environ.get("LBNMPC_PURE_PYTHON") else "compiled"
    if name == "python":
        return _core_py
    if name == "compiled":
        try:
            from . import _core
        except ImportError:
            return _core_py
        return _core
    raise ValueError(f"unknown backend {name!r}")


_impl = load_backend()
BACKEND = "compiled" if _impl is not _core_py else "python"

kernel_vector = _impl.kernel_vector
gram = _impl.gram
gp_channel = _impl.gp_channel
nominal_accel = _impl.nominal_accel
accel = _impl.accel
interval = _impl.interval
