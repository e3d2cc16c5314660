"""Global worker-pool control.

All row-parallel kernels (Gram assembly, batched CG) draw from one numba
thread pool. Results are bitwise independent of the worker count because
every row's arithmetic is self-contained; this knob only changes wall time.
"""

import numba


def set_workers(n: int) -> int:
    """Cap the worker pool at ``n`` threads.

    Requests beyond what the machine (or the NUMBA_NUM_THREADS limit)
    supports are clamped. Returns the effective worker count.
    """
    if n < 1:
        raise ValueError("worker count must be >= 1")
    limit = numba.config.NUMBA_NUM_THREADS
    effective = min(int(n), limit)
    numba.set_num_threads(effective)
    return effective


def get_workers() -> int:
    """Current worker-pool size."""
    return numba.get_num_threads()
