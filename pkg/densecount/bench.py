"""Inference latency harness.

Absolute timings depend on the machine; only the structure of the report
(warmup count, timed iterations, complexity figures) is fixed.
"""
import logging
import time
from dataclasses import dataclass

import numpy as np

from ._enum import ParamEnum
from .model import complexity_report, forward

__all__ = ["Precision", "LatencyReport", "benchmark_forward"]

log = logging.getLogger(__name__)


class Precision(ParamEnum):
    float32 = "float32"
    float64 = "float64"


@dataclass(frozen=True)
class LatencyReport:
    timings_ms: tuple
    warmup: int
    precision: str
    complexity: object

    @property
    def iterations(self):
        return len(self.timings_ms)

    @property
    def mean_ms(self):
        return float(np.mean(self.timings_ms))

    @property
    def median_ms(self):
        return float(np.median(self.timings_ms))

    @property
    def p95_ms(self):
        return float(np.percentile(self.timings_ms, 95))

    def lines(self):
        lines = [
            f"precision          {self.precision}",
            f"warmup             {self.warmup}",
            f"timed iterations   {self.iterations}",
            f"latency mean       {self.mean_ms:.3f} ms",
            f"latency median     {self.median_ms:.3f} ms",
            f"latency p95        {self.p95_ms:.3f} ms",
        ]
        return lines + self.complexity.lines()


def benchmark_forward(
    params,
    input_h,
    input_w,
    iterations=10,
    warmup=2,
    precision="float32",
    seed=0,
    clock=time.perf_counter,
):
    """Time forward passes of a single image.

    Parameters
    ----------
    params : ModelParams
    input_h, input_w : int
    iterations : int, default 10
        Timed forward passes; must be at least 1.
    warmup : int, default 2
        Untimed passes run first.
    precision : {"float32", "float64"}, default "float32"
    seed : int, default 0
        Seed of the fixed random input.
    clock : callable, default time.perf_counter

    Returns
    -------
    LatencyReport
    """
    if iterations < 1 or warmup < 0:
        raise ValueError("iterations must be at least 1 and warmup nonnegative")
    dtype = np.dtype(Precision.get_value(precision).value)
    run_params = params.astype(dtype)
    shape = (1, params.architecture.in_channels, input_h, input_w)
    image = np.random.default_rng(seed).random(shape).astype(dtype)

    for _ in range(warmup):
        forward(run_params, image)
    timings = []
    for _ in range(iterations):
        started = clock()
        forward(run_params, image)
        timings.append((clock() - started) * 1000.0)
    log.debug("timed %d forward passes of %dx%d", iterations, input_h, input_w)
    return LatencyReport(
        tuple(timings),
        warmup,
        dtype.name,
        complexity_report(params, input_h, input_w, bytes_per_value=dtype.itemsize),
    )
