"""Seeded random streams.

Every consumer draws from its own substream keyed by ``(seed, purpose, index)``,
so e.g. training step ``m`` never shares randomness with step ``m' != m`` and a
resumed run only needs the step index to continue bit-exactly.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

INIT = 0
TRAIN = 1
EVAL = 2
REFERENCE = 3
CONVERGENCE = 4

THREADS_ENV = "DEEPKOLMOGOROV_THREADS"


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def sharded(fn, total: int, rng, chunk: int = 65536, threads: int | None = None) -> np.ndarray:
    """Evaluate ``fn(n, gen)`` over fixed-size shards and concatenate in shard order.

    Shard ``i`` always gets the ``i``-th child stream of ``rng``, so the result
    depends on ``chunk`` but not on the number of threads.
    """
    rng = as_generator(rng)
    sizes = [chunk] * (total // chunk)
    if total % chunk:
        sizes.append(total % chunk)
    children = rng.spawn(len(sizes))
    threads = threads or default_threads()
    if threads == 1 or len(sizes) == 1:
        parts = [fn(n, g) for n, g in zip(sizes, children)]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(fn, sizes, children))
    return np.concatenate(parts)
