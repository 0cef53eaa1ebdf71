import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Tuple, TypeVar

from .config import DEFAULT_CONFIG

T = TypeVar("T")


def chunk_bounds(n_items: int, chunk_size: int) -> List[Tuple[int, int, int]]:
    """(chunk index, start, stop) triples covering range(n_items)."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    return [(i, start, min(start + chunk_size, n_items))
            for i, start in enumerate(range(0, n_items, chunk_size))]


def map_chunks(fn: Callable[[int, int, int], T], n_items: int,
               chunk_size: int = None, threads: int = None) -> List[T]:
    """Evaluate fn on fixed chunks of range(n_items), results in chunk order.

    Chunk boundaries depend only on chunk_size, so the result is identical for
    any number of worker threads.
    """
    chunk_size = chunk_size or DEFAULT_CONFIG.chunk_size
    threads = threads or DEFAULT_CONFIG.threads
    bounds = chunk_bounds(n_items, chunk_size)
    if threads <= 1 or len(bounds) <= 1:
        return [fn(*b) for b in bounds]
    logging.debug(f"Dispatching {len(bounds)} chunks to {threads} threads")
    with ThreadPoolExecutor(max_workers=threads) as executor:
        futures = [executor.submit(fn, *b) for b in bounds]
        return [f.result() for f in futures]
