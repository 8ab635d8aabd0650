"""CPU differentiable 4D Gaussian splatting with learned dynamic/static decomposition."""

import os

# numba's TBB layer needs a newer libtbb than many systems ship; prefer OpenMP/workqueue.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .threads import configure_threads  # noqa: E402

configure_threads()

__version__ = "0.1.0"
