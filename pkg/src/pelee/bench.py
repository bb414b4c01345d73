"""Latency harness: batch-1 inference over a fixed set of images, repeated several runs.

The default protocol times 100 single-image inferences per run and 10 runs, and
reports the per-run wall times with their mean and standard deviation.
"""
from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .graph import Graph, GraphError, check_weights, execute, fold_batchnorm, infer_shapes

# per-image preprocessing applied inside the timed region
PIXEL_MEAN = 127.5
PIXEL_SCALE = 1 / 127.5


@dataclass
class BenchReport:
    model: str
    input_dims: tuple[int, int, int, int]
    images_per_run: int
    runs: int
    warmup: int
    fused: bool
    run_times_s: list[float] = field(default_factory=list)
    threads: dict = field(default_factory=dict)

    @property
    def mean_run_time_s(self) -> float:
        return statistics.fmean(self.run_times_s)

    @property
    def std_run_time_s(self) -> float:
        """Sample standard deviation of the per-run times (0 for a single run)."""
        return statistics.stdev(self.run_times_s) if len(self.run_times_s) > 1 else 0.0

    @property
    def mean_latency_ms(self) -> float:
        return 1000.0 * self.mean_run_time_s / self.images_per_run

    @property
    def std_latency_ms(self) -> float:
        return 1000.0 * self.std_run_time_s / self.images_per_run

    @property
    def images_per_second(self) -> float:
        return self.images_per_run / self.mean_run_time_s

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["input_dims"] = list(self.input_dims)
        doc.update(
            format="pelee-bench",
            version=1,
            batch_size=self.input_dims[0],
            mean_run_time_s=self.mean_run_time_s,
            std_run_time_s=self.std_run_time_s,
            mean_latency_ms=self.mean_latency_ms,
            std_latency_ms=self.std_latency_ms,
            images_per_second=self.images_per_second,
        )
        return doc

    def table(self) -> str:
        rows = [
            ("model", self.model),
            ("input", "x".join(map(str, self.input_dims))),
            ("bn folded", "yes" if self.fused else "no"),
            ("protocol", f"{self.images_per_run} images x {self.runs} runs, batch 1, {self.warmup} warmup"),
            ("run times (s)", ", ".join(f"{t:.4f}" for t in self.run_times_s)),
            ("mean latency", f"{self.mean_latency_ms:.3f} ms/image (std {self.std_latency_ms:.3f})"),
            ("throughput", f"{self.images_per_second:.2f} images/s"),
            ("threads", ", ".join(f"{k}={v}" for k, v in self.threads.items()) or "-"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def _thread_info() -> dict:
    info = {"cpu_count": os.cpu_count() or 1, "python": platform.python_version()}
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if var in os.environ:
            info[var] = os.environ[var]
    return info


def make_images(input_dims, count: int, seed: int = 0) -> list[np.ndarray]:
    """Fixed-seed random 8-bit-range images, one (1, C, H, W) array each."""
    rng = np.random.default_rng(seed)
    _, c, h, w = input_dims
    return [rng.integers(0, 256, (1, c, h, w)).astype(np.float32) for _ in range(count)]


class _Runner:
    def __init__(self, graph: Graph, weights: Mapping, input_dims, fused: bool):
        input_dims = tuple(int(d) for d in input_dims)
        if input_dims[0] != 1:
            raise ValueError(f"benchmark protocol uses batch size 1, got {input_dims[0]}")
        try:
            infer_shapes(graph, input_dims)
            check_weights(graph, weights)
            if fused:
                graph, weights = fold_batchnorm(graph, weights)
        except (GraphError, ValueError) as exc:
            raise GraphError(f"graph is not executable at {input_dims}: {exc}") from exc
        self.graph, self.weights, self.input_dims = graph, weights, input_dims

    def infer(self, image: np.ndarray):
        x = (image - np.float32(PIXEL_MEAN)) * np.float32(PIXEL_SCALE)
        return execute(self.graph, self.weights, x, check=False)

    def timed_run(self, images) -> float:
        start = time.perf_counter()
        for img in images:
            self.infer(img)
        return time.perf_counter() - start


def run_benchmark(graph: Graph, weights: Mapping, input_dims, images_per_run: int = 100, runs: int = 10,
                  warmup: int = 1, fused: bool = False, model: str = "model", seed: int = 0) -> BenchReport:
    """Time ``runs`` passes over ``images_per_run`` batch-1 images after ``warmup`` untimed passes."""
    if runs < 1 or images_per_run < 1 or warmup < 0:
        raise ValueError("runs and images_per_run must be >= 1, warmup >= 0")
    runner = _Runner(graph, weights, input_dims, fused)
    images = make_images(runner.input_dims, images_per_run, seed)
    for _ in range(warmup):
        for img in images:
            runner.infer(img)
    report = BenchReport(model, runner.input_dims, images_per_run, runs, warmup, fused, threads=_thread_info())
    for _ in range(runs):
        report.run_times_s.append(runner.timed_run(images))
    return report


def paired_benchmark(graph: Graph, weights: Mapping, input_dims, images_per_run: int = 100, runs: int = 10,
                     warmup: int = 1, model: str = "model", seed: int = 0) -> tuple[BenchReport, BenchReport]:
    """Unfused and fused reports with their runs interleaved, so host drift hits both equally."""
    plain = _Runner(graph, weights, input_dims, fused=False)
    folded = _Runner(graph, weights, input_dims, fused=True)
    images = make_images(plain.input_dims, images_per_run, seed)
    for _ in range(warmup):
        for img in images:
            plain.infer(img)
            folded.infer(img)
    info = _thread_info()
    reports = (
        BenchReport(model, plain.input_dims, images_per_run, runs, warmup, False, threads=info),
        BenchReport(model, plain.input_dims, images_per_run, runs, warmup, True, threads=info),
    )
    for i in range(runs):
        # alternate which variant goes first
        pair = [(plain, reports[0]), (folded, reports[1])]
        for runner, report in (pair if i % 2 == 0 else pair[::-1]):
            report.run_times_s.append(runner.timed_run(images))
    return reports
