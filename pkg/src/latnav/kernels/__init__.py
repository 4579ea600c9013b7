"""Ray-casting kernel with a compiled core and a pure-Python fallback.

The compiled extension is preferred when available; set LATNAV_PURE_PYTHON=1
to force the fallback (used by the backend-comparison benchmark and tests).
"""

import os

from . import _ray_py

if os.environ.get("LATNAV_PURE_PYTHON"):
    _impl = _ray_py
else:
    try:
        from . import _ray_cy as _impl
    except ImportError:
        _impl = _ray_py

cast_rays = _impl.cast_rays
BACKEND = _impl.BACKEND

cast_rays_py = _ray_py.cast_rays


def cast_rays_cy():
    """Return the compiled cast_rays, or None if the extension is missing."""
    try:
        from . import _ray_cy
    except ImportError:
        return None
    return _ray_cy.cast_rays
