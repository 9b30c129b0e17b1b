"""Timing harness for the self-similarity kernel variants."""

from __future__ import annotations

import statistics
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .stss import OffsetWindow, local_correlation_direct, local_correlation_tiled, normalize, stripe_tile

VARIANTS = ("naive", "tiled", "parallel")
CSV_FIELDS = ("variant", "T", "X", "Y", "C", "L", "U", "V", "threads", "wall_ms", "macs", "checksum")


def mac_count(shape, window: OffsetWindow) -> int:
    """Multiply-accumulates of one similarity pass: T*X*Y*L*U*V*C."""
    T, X, Y, C = shape
    L, U, V = window.extents
    return T * X * Y * L * U * V * C


def checksum(a: np.ndarray) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(a).tobytes()):08x}"


@dataclass
class BenchRow:
    variant: str
    shape: tuple[int, int, int, int]
    window: OffsetWindow
    threads: int
    wall_ms: float
    checksum: str

    def fields(self) -> list:
        T, X, Y, C = self.shape
        L, U, V = self.window.extents
        return [self.variant, T, X, Y, C, L, U, V, self.threads, f"{self.wall_ms:.3f}",
                mac_count(self.shape, self.window), self.checksum]


def _time(fn, repeats: int):
    out, times = None, []
    for _ in range(repeats):
        t = time.perf_counter()
        out = fn()
        times.append((time.perf_counter() - t) * 1e3)
    return out, statistics.median(times)


def run_bench(shape=(8, 14, 14, 32), window=None, tile=(4, 4), threads: int = 4, repeats: int = 5, seed: int = 0):
    """Time every variant on one normalised random map; returns a list of :class:`BenchRow`."""
    window = window or OffsetWindow.symmetric(2, 4)
    v = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
    q, _ = normalize(v)
    stripes = stripe_tile(shape[1], shape[2], threads)
    runs = {
        "naive": (1, lambda: local_correlation_direct(q, q, window)),
        "tiled": (1, lambda: local_correlation_tiled(q, q, window, tile, threads=1)),
        # cache-sized tiles are too fine for threads: per-call overhead holds the GIL
        "parallel": (threads, lambda: local_correlation_tiled(q, q, window, stripes, threads=threads)),
    }
    rows = []
    for name in VARIANTS:
        n, fn = runs[name]
        out, ms = _time(fn, repeats)
        rows.append(BenchRow(name, tuple(shape), window, n, ms, checksum(out)))
    return rows


def rows_csv(rows) -> str:
    lines = [",".join(CSV_FIELDS)] + [",".join(str(f) for f in r.fields()) for r in rows]
    return "\n".join(lines) + "\n"
