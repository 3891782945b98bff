"""Order-preserving map over worker processes."""

import os
from concurrent.futures import ProcessPoolExecutor


def _single_threaded():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def pmap(fn, items, jobs=1):
    """``[fn(x) for x in items]``, optionally spread over ``jobs`` processes.

    Each item is processed independently with its own seed, so the result
    does not depend on ``jobs``.
    """
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_single_threaded) as pool:
        return list(pool.map(fn, items))
