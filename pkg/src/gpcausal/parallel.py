"""Process-pool map used for chains and replications.

The worker count comes from the ``GPCAUSAL_WORKERS`` environment variable
(default 1, meaning run in-process). BLAS is pinned to one thread per worker.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

WORKERS_ENV = "GPCAUSAL_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _init_worker():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(1)


def pmap(fn, items, workers=None):
    items = list(items)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), initializer=_init_worker) as ex:
        return list(ex.map(fn, items))
