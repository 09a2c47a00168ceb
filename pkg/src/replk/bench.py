"""Latency harness for stacks of depth-wise convolutions.

Protocol: for every (resolution, kernel, backend) cell, build ``layers``
same-padding stride-1 depth-wise convs on a ``(batch, channels, R, R)``
input, run ``warmup`` untimed forward passes, then ``reps`` timed ones with
``time.perf_counter``.  Mean, sample std-dev and median are reported.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .conv import BACKENDS, ConvSpec, ConvWeights, conv2d
from .tensor import Normal, Rng, Uniform

DEFAULT_KERNELS = (3, 5, 7, 9, 13, 17, 21, 27, 29, 31)
DEFAULT_RESOLUTIONS = (16, 32, 64)
CSV_HEADER = ("resolution", "kernel", "backend", "mean_ms", "std_ms", "reps", "threads")
MIN_REPS = 5
MIN_WARMUP = 3


@dataclass
class BenchRow:
    resolution: int
    kernel: int
    backend: str
    mean_ms: float
    std_ms: float
    reps: int
    threads: int
    median_ms: float = float("nan")
    skipped: bool = False


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO() if fh is None else fh
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.resolution, r.kernel, r.backend, f"{r.mean_ms:.4f}",
                             f"{r.std_ms:.4f}", r.reps, r.threads])
        return buf.getvalue() if fh is None else ""

    def lookup(self, resolution: int, kernel: int, backend: str) -> BenchRow:
        for r in self.rows:
            if (r.resolution, r.kernel, r.backend) == (resolution, kernel, backend):
                return r
        raise KeyError((resolution, kernel, backend))

    def grid(self) -> str:
        """Mean latency grid: one line per (R, backend), one column per K."""
        kernels = sorted({r.kernel for r in self.rows})
        lines = [",".join(["resolution", "backend"] + [f"K{k}" for k in kernels])]
        seen = []
        for r in self.rows:
            if (r.resolution, r.backend) not in seen:
                seen.append((r.resolution, r.backend))
        for res, backend in seen:
            cells = []
            for k in kernels:
                try:
                    row = self.lookup(res, k, backend)
                    cells.append("skipped" if row.skipped else f"{row.mean_ms:.2f}")
                except KeyError:
                    cells.append("")
            lines.append(",".join([f"{res}x{res}", backend] + cells))
        return "\n".join(lines)


def _stack_weights(kernel: int, channels: int, layers: int, seed: int):
    rng = Rng(seed)
    # std 1/K keeps activations O(1) through the stack (no denormal slow paths)
    return [ConvWeights(rng.sample((channels, 1, kernel, kernel), Normal(0.0, 1.0 / kernel)))
            for _ in range(layers)]


def run_stack(x, weights, spec, backend, tile=8, threads=1):
    for w in weights:
        x = conv2d(x, w, spec, backend=backend, tile=tile, threads=threads)
    return x


def bench_stack(kernel_sizes: Sequence[int] = DEFAULT_KERNELS,
                resolutions: Sequence[int] = DEFAULT_RESOLUTIONS,
                channels: int = 64, layers: int = 24, backend: str | Iterable[str] = "blocked",
                reps: int = MIN_REPS, threads: int = 1, batch: int = 4,
                warmup: int = MIN_WARMUP, tile: int = 8, seed: int = 0) -> BenchReport:
    backends = list(BACKENDS) if backend == "all" else (
        [backend] if isinstance(backend, str) else list(backend))
    for b in backends:
        if b not in BACKENDS:
            raise ValueError(f"unknown backend {b!r}; choose from {BACKENDS} or 'all'")
    if reps < MIN_REPS:
        raise ValueError(f"reps must be >= {MIN_REPS}, got {reps}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be >= {MIN_WARMUP}, got {warmup}")
    if min(channels, layers, batch, threads, tile) < 1:
        raise ValueError("channels, layers, batch, threads and tile must be >= 1")

    report = BenchReport()
    for res in resolutions:
        for k in kernel_sizes:
            spec = ConvSpec.same(k, channels, depthwise=True)
            for b in backends:
                try:
                    x = Rng(seed).sample((batch, channels, res, res), Uniform(-1.0, 1.0))
                    weights = _stack_weights(k, channels, layers, seed + 1)
                    for _ in range(warmup):
                        run_stack(x, weights, spec, b, tile, threads)
                    times = []
                    for _ in range(reps):
                        t0 = time.perf_counter()
                        run_stack(x, weights, spec, b, tile, threads)
                        times.append((time.perf_counter() - t0) * 1e3)
                except MemoryError:
                    report.rows.append(BenchRow(res, k, b, float("nan"), float("nan"), 0,
                                                threads, skipped=True))
                    continue
                report.rows.append(BenchRow(res, k, b, statistics.fmean(times),
                                            statistics.stdev(times), reps, threads,
                                            statistics.median(times)))
    return report


def latency_ratio(report: BenchReport, resolution: int, backend: str = "blocked",
                  small: int = 3, large: int = 31) -> float:
    return report.lookup(resolution, large, backend).mean_ms / report.lookup(resolution, small, backend).mean_ms


def flops_ratio(small: int = 3, large: int = 31) -> float:
    return (large / small) ** 2

