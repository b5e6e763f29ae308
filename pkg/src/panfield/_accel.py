"""Backend selection for the hot kernels.

Set ``PANFIELD_NUMBA=0`` to force the pure-numpy fallback path.  Numba is
used whenever it imports and the flag is not disabled.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("PANFIELD_NUMBA", "1").strip().lower()

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(fn=None, *, fastmath=False):
    """Compile ``fn`` with numba when available, otherwise return it untouched.

    The returned object is always callable; without numba it runs as plain
    (slow) Python and is only used by the backend-agreement tests.  Usable
    bare (``@njit``) or with options (``@njit(fastmath=True)``).
    """
    if fn is None:
        return lambda f: njit(f, fastmath=fastmath)
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True, fastmath=fastmath)(fn)
    return fn


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
