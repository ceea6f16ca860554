"""Seeded random streams.

Chains are grouped into fixed-size blocks and every block draws from its own
counter-based Philox stream keyed by (seed, block index), so a chain's output never
depends on how many workers share the blocks.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

from services.errors import ConfigError, to_int

LOGGER = logging.getLogger("rng")

CHAIN_BLOCK = 512
_UINT64_MASK = (1 << 64) - 1

T = TypeVar("T")


def check_seed(seed: int) -> int:
    seed = to_int(seed, "seed")
    if seed < 0:
        raise ConfigError(f"Invalid seed={seed}: must be >= 0")
    return seed


def stream(seed: int, index: int = 0, purpose: int = 0) -> np.random.Generator:
    """Generator for block `index` of a run seeded with `seed`.

    `purpose` separates independent uses of one seed (sampling, pilot runs, EM restarts).
    """
    key = np.array([check_seed(seed) & _UINT64_MASK, ((purpose & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def chain_blocks(n: int) -> list[tuple[int, int]]:
    """[start, stop) ranges covering n chains in CHAIN_BLOCK sized pieces."""
    return [(start, min(start + CHAIN_BLOCK, n)) for start in range(0, n, CHAIN_BLOCK)]


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = to_int(os.getenv("COMPDIFF_THREADS", "1") or "1", "COMPDIFF_THREADS")
    threads = to_int(threads, "threads")
    if threads < 0:
        raise ConfigError(f"Invalid threads={threads}: must be >= 0")
    if threads == 0:
        return max(1, os.cpu_count() or 1)
    return threads


def run_blocks(n: int, worker: Callable[[int, int, int], T], threads: int | None = 1) -> list[T]:
    """Call worker(block_index, start, stop) for every chain block, results in block order."""
    blocks = chain_blocks(n)
    workers = min(resolve_threads(threads), max(1, len(blocks)))
    if workers <= 1:
        return [worker(i, start, stop) for i, (start, stop) in enumerate(blocks)]
    LOGGER.debug("Running %s chain blocks on %s threads", len(blocks), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(worker, i, start, stop) for i, (start, stop) in enumerate(blocks)]
        return [future.result() for future in futures]
