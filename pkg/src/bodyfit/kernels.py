"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions
are used. Set ``BODYFIT_KERNELS=python`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("BODYFIT_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

rodrigues_batch = _impl.rodrigues_batch
forward_chain = _impl.forward_chain
point_jacobian = _impl.point_jacobian
overlap_residuals = _impl.overlap_residuals


def available_backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover
        return out
    out["compiled"] = _compiled
    return out
