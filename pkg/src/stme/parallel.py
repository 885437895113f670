"""Optional data-parallel map; results always reduce in submission order.

STME_THREADS caps the worker count. The default of 1 runs serially, which is
the fully deterministic mode every guarantee in this package is stated for.
"""

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    raw = os.environ.get("STME_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def worker_map(fn, items):
    """Map fn over items, collecting results in index order regardless of
    completion order."""
    n = thread_count()
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
