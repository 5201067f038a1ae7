"""
File: random_streams.py
Description: Seed-derived random substreams, batch execution over a thread pool and
    order-independent Monte Carlo aggregation.
Author: free-boundary-lab developers
Date Created: 17/10/2026
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np
from loguru import logger

T = TypeVar("T")

DEFAULT_BATCH_SIZE = 500


def stage_key(stage: str) -> int:
    """Stable integer key of a stage name (CRC32)."""
    return zlib.crc32(stage.encode("utf-8"))


def substream(seed: int, stage: str, index: int) -> np.random.Generator:
    """Counter-based generator for batch ``index`` of ``stage``.

    The stream depends only on (seed, stage, index), never on which worker runs it.
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=(stage_key(stage), int(index)))
    return np.random.Generator(np.random.Philox(sequence))


def batch_sizes(n_paths: int, batch_size: int = DEFAULT_BATCH_SIZE) -> list[int]:
    """Splits ``n_paths`` into full batches plus a remainder."""
    if n_paths <= 0:
        return []
    full, rest = divmod(int(n_paths), int(batch_size))
    return [int(batch_size)] * full + ([rest] if rest else [])


def run_batches(
    fn: Callable[[np.random.Generator, int, int], T],
    n_paths: int,
    seed: int,
    stage: str,
    workers: int = 1,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[T]:
    """Runs ``fn(rng, n, index)`` for every batch and returns the results in batch order.

    Args:
        fn: Batch kernel; receives its own generator, the batch size and the batch index.
        n_paths: Total number of paths.
        seed: Root seed.
        stage: Stage name mixed into every substream.
        workers: Thread count; 1 runs inline.
        batch_size: Paths per batch.

    Returns:
        One result per batch, ordered by batch index.
    """
    sizes = batch_sizes(n_paths, batch_size)

    def task(index: int) -> T:
        return fn(substream(seed, stage, index), sizes[index], index)

    logger.debug("{}: {} paths in {} batches on {} worker(s)", stage, n_paths, len(sizes), workers)
    if workers <= 1 or len(sizes) <= 1:
        return [task(i) for i in range(len(sizes))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task, range(len(sizes))))


@dataclass(frozen=True)
class MCSummary:
    """Sample mean and standard error of a Monte Carlo estimate."""

    mean: float
    se: float
    n: int

    @classmethod
    def from_samples(cls, samples: Sequence[float] | np.ndarray) -> "MCSummary":
        """Compensated (math.fsum) mean and standard error of per-path values."""
        values = np.asarray(samples, dtype=float).ravel()
        n = values.size
        if n == 0:
            return cls(mean=float("nan"), se=float("nan"), n=0)
        mean = math.fsum(values) / n
        if n == 1:
            return cls(mean=mean, se=0.0, n=1)
        var = math.fsum((values - mean) ** 2) / (n - 1)
        return cls(mean=mean, se=math.sqrt(var / n), n=n)


def concat(batches: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenates per-batch arrays in batch order."""
    if not batches:
        return np.empty(0)
    return np.concatenate([np.asarray(b, dtype=float).ravel() for b in batches])
