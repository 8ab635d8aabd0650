"""Worker-pool sizing shared by the CLI and library entry points."""

from __future__ import annotations

import os

ENV_VAR = "SWIFT4D_THREADS"


def configure_threads(n: int | None = None) -> int:
    """Cap numba's worker pool at ``n`` (or $SWIFT4D_THREADS); returns the count in use."""
    import numba

    if n is None:
        raw = os.environ.get(ENV_VAR)
        if not raw:
            return numba.get_num_threads()
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("thread count must be >= 1")
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n
