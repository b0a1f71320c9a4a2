import itertools

import pytest

from densecount.bench import benchmark_forward, Precision
from densecount.model import init_params


def fake_clock(step=0.004):
    ticks = itertools.count()
    return lambda: next(ticks) * step


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_benchmark_structure(precision):
    report = benchmark_forward(init_params(0), 16, 24, iterations=3, warmup=1, precision=precision)
    assert report.iterations == 3
    assert report.warmup == 1
    assert report.precision == precision
    assert all(t >= 0 for t in report.timings_ms)
    assert report.complexity.param_count == 60545
    assert report.complexity.input_h == 16 and report.complexity.input_w == 24


def test_benchmark_fake_clock():
    report = benchmark_forward(
        init_params(0), 8, 8, iterations=4, warmup=0, clock=fake_clock()
    )
    assert report.timings_ms == pytest.approx((4.0,) * 4)
    assert report.mean_ms == pytest.approx(4.0)
    assert report.median_ms == pytest.approx(4.0)
    assert report.p95_ms == pytest.approx(4.0)


def test_benchmark_model_bytes_follow_precision():
    params = init_params(0)
    single = benchmark_forward(params, 8, 8, iterations=1, warmup=0, precision="float32")
    double = benchmark_forward(params, 8, 8, iterations=1, warmup=0, precision="float64")
    assert single.complexity.model_bytes == 60545 * 4
    assert double.complexity.model_bytes == 60545 * 8
    assert params["stem"].weight.dtype.name == "float64"


def test_benchmark_report_lines():
    text = "\n".join(benchmark_forward(init_params(0), 8, 8, iterations=1, warmup=0).lines())
    for label in ("warmup", "timed iterations", "latency mean", "latency p95", "parameters"):
        assert label in text


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"warmup": -1}, {"precision": "float16"}])
def test_benchmark_invalid(kwargs):
    with pytest.raises(ValueError):
        benchmark_forward(init_params(0), 8, 8, **kwargs)


def test_precision_names():
    assert Precision.get_value("FLOAT32") == Precision.float32
