import os
from concurrent.futures import ThreadPoolExecutor


def resolve_threads(threads=None):
    """Worker count: explicit value, else ERGODIC_THREADS, else 1."""
    if threads is None:
        threads = os.getenv("ERGODIC_THREADS", "1")
    return max(1, int(threads))


def block_ranges(n, block_size):
    """Fixed [start, stop) blocks covering range(n); independent of worker count."""
    block_size = max(1, int(block_size))
    return [(start, min(start + block_size, n)) for start in range(0, n, block_size)]


def map_blocks(fn, n, block_size, threads=None):
    """Apply ``fn(start, stop)`` to every block and return results in block order.

    The split depends only on ``n`` and ``block_size``, so any reduction over the
    returned list is identical for every thread count.
    """
    blocks = block_ranges(n, block_size)
    threads = resolve_threads(threads)
    if threads == 1 or len(blocks) == 1:
        return [fn(start, stop) for start, stop in blocks]
    with ThreadPoolExecutor(max_workers=min(threads, len(blocks))) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))
