"""Hot-kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy fallback is used.  ``SINESEG_KERNELS=numpy|native`` overrides the
choice (``native`` raises if the extension is missing, so tests can demand
it explicitly).
"""

import os

from . import _numpy_ref

_choice = os.environ.get("SINESEG_KERNELS", "auto")

if _choice == "numpy":
    _impl = _numpy_ref
elif _choice == "native":
    from . import _native as _impl
else:
    try:
        from . import _native as _impl
    except ImportError:
        _impl = _numpy_ref

BACKEND = _impl.BACKEND
unfold = _impl.unfold
fold_add = _impl.fold_add
ssm_scan = _impl.ssm_scan
ssm_scan_grad = _impl.ssm_scan_grad


def get_backends():
    """Return the available kernel implementations keyed by name."""
    impls = {"numpy": _numpy_ref}
    try:
        from . import _native
        impls["native"] = _native
    except ImportError:
        pass
    return impls
