"""Seed derivation, replica batching, and standard-error helpers."""
from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_BATCH = 1024

THREADS_ENV_VAR = "FLUCTSEL_THREADS"


def tag_hash(tag: str) -> int:
    """Stable 32-bit hash of a stream tag (Python's hash() is salted)."""
    return zlib.crc32(tag.encode())


def substream(master_seed: int, *tags) -> np.random.Generator:
    """Independent generator derived from a master seed and tag words.

    Tags may be ints or strings; strings are crc32-hashed.  The scheme is
    master seed + experiment-name hash + counter, so replica streams are
    reproducible regardless of scheduling.
    """
    words = [int(master_seed) & 0xFFFFFFFF]
    for t in tags:
        words.append(tag_hash(t) if isinstance(t, str) else int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def max_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(
                f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def replica_batches(n_replicas: int, batch_size: int = DEFAULT_BATCH):
    """Split replicas into fixed (start, count) batches.

    The batch layout depends only on ``n_replicas`` and ``batch_size`` so
    results are independent of the worker count.
    """
    out = []
    start = 0
    while start < n_replicas:
        count = min(batch_size, n_replicas - start)
        out.append((start, count))
        start += count
    return out


def map_batches(fn, batches, threads: int | None = None):
    """Apply ``fn(batch_index, start, count)`` to every batch.

    Results are collected in batch order, so aggregation is deterministic
    for any number of worker threads.
    """
    if threads is None:
        threads = max_threads()
    if threads <= 1 or len(batches) <= 1:
        return [fn(i, s, c) for i, (s, c) in enumerate(batches)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(fn, i, s, c) for i, (s, c) in enumerate(batches)]
        return [f.result() for f in futures]


def mean_and_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()) if v.size else float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def binomial_se(p_hat: float, n: int) -> float:
    return float(np.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n))


def variance_and_se(values) -> tuple[float, float]:
    """Sample variance with the standard error of the variance estimator."""
    v = np.asarray(values, dtype=float)
    n = v.size
    var = float(v.var(ddof=1))
    m = v.mean()
    m4 = float(np.mean((v - m) ** 4))
    # SE of the sample variance from the fourth central moment
    se = float(np.sqrt(max(m4 - (n - 3) / (n - 1) * var ** 2, 0.0) / n))
    return var, se
