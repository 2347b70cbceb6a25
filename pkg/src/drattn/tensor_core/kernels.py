"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``DRATTN_KERNELS=python`` to force the fallback.
"""
import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DRATTN_KERNELS", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _kernels_c as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _kernels_py

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
