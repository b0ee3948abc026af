"""Rasterization backends.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``SPLAT4D_BACKEND=python`` to force the fallback.
"""

import os

from . import fallback

_compiled = None
if os.environ.get("SPLAT4D_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKENDS = {"python": fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

DEFAULT_BACKEND = "compiled" if _compiled is not None else "python"


def get_backend(name=None):
    name = name or DEFAULT_BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"raster backend {name!r} unavailable (have {sorted(BACKENDS)})") from None

