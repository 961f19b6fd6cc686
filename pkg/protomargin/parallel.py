"""
Thread-capped, order-preserving map for per-sample work.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar


logger = logging.getLogger("protomargin.parallel")

THREADS_ENV = "PROTO_MARGIN_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def worker_threads() -> int:
    """Thread cap from PROTO_MARGIN_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1").strip()
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if threads < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {threads}")
    return threads


def map_ordered(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Apply `fn` to every item; results come back in input order."""
    threads = threads or worker_threads()
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
