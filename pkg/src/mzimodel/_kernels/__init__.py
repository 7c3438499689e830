"""Kernel backend selection.

Hot numeric paths exist twice: numba ``@njit`` kernels and pure-numpy
equivalents with identical signatures. The active backend is chosen once at
import from the ``MZIMODEL_BACKEND`` environment variable:

    auto   (default) use numba when importable, else numpy
    numba  require numba, fail loudly if missing
    numpy  force the pure-numpy path

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from ..errors import ConfigError

_requested = os.environ.get("MZIMODEL_BACKEND", "auto").strip().lower()

if _requested in ("", "auto"):
    try:
        from . import am_numba as am
        from . import mlp_numba as mlp
        BACKEND = "numba"
    except ImportError:
        from . import am_numpy as am
        from . import mlp_numpy as mlp
        BACKEND = "numpy"
elif _requested == "numba":
    from . import am_numba as am
    from . import mlp_numba as mlp
    BACKEND = "numba"
elif _requested == "numpy":
    from . import am_numpy as am
    from . import mlp_numpy as mlp
    BACKEND = "numpy"
else:
    raise ConfigError(
        f"MZIMODEL_BACKEND={_requested!r} not understood "
        "(expected 'auto', 'numba', or 'numpy')")


def backend_name():
    """Name of the kernel backend picked at import time."""
    return BACKEND
