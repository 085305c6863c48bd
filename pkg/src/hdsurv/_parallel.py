"""Ordered map over a bounded thread pool.

Results are returned in input order and every task carries its own RNG
stream, so the output is independent of ``threads``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def map_ordered(fn, items, threads=1):
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=int(threads)) as ex:
        return list(ex.map(fn, items))


def spawn_generators(seed, k):
    """``k`` independent generators derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]
