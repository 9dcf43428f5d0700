"""Backend selection for the MLP loss/gradient kernel.

The compiled extension is used when importable; set ``ODEMERGE_BACKEND=python``
to force the numpy fallback.  Both backends are deterministic but sum in
different orders, so they agree to rounding rather than bit-for-bit.
"""
import os

import numpy as np

from . import _fallback
from .errors import ArgumentError

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _fallback.mlp_loss_grad}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled.mlp_loss_grad

_requested = os.environ.get("ODEMERGE_BACKEND", "").strip().lower()
if _requested in BACKENDS:
    BACKEND = _requested
else:
    BACKEND = "compiled" if _compiled is not None else "python"


def mlp_loss_grad(params, X, y, sizes, activation, want_grad=True, backend=None):
    """Mean cross-entropy of the MLP on ``(X, y)`` and, optionally, its gradient.

    ``sizes`` are the layer widths, ``activation`` the integer tag (0 tanh,
    1 relu).  Returns ``(loss, grad_or_None)``.
    """
    name = backend or BACKEND
    if name not in BACKENDS:
        raise ArgumentError(f"unknown backend {name!r}; available: {', '.join(sorted(BACKENDS))}")
    fn = BACKENDS[name]
    return fn(
        np.ascontiguousarray(params, dtype=np.float64),
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        np.ascontiguousarray(sizes, dtype=np.int64),
        int(activation),
        bool(want_grad),
    )
