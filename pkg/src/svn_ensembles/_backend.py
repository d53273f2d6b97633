"""Select the compiled kernels when available.

Set ``SVN_ENSEMBLES_PURE=1`` to force the numpy fallback.
"""

import os

from . import _pure

BACKEND = "pure"
kernels = _pure

if not os.environ.get("SVN_ENSEMBLES_PURE"):
    try:
        from . import _core

        kernels = _core
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass
