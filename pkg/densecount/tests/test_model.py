import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from densecount.errors import ConfigurationError, DimensionError, RegionError
from densecount.groundtruth import DotMap, render_density
from densecount.io import load_checkpoint, save_checkpoint
from densecount.model import (
    Architecture,
    backward,
    complexity_report,
    count_from_density,
    forward,
    forward_with_cache,
    init_params,
    Layer,
    ModelParams,
    predict_counts,
    REFERENCE_COMPLEXITY,
)

from .common import small_architecture


def test_param_count():
    params = init_params(0)
    assert params.param_count == 60545
    assert Architecture().param_count() == 60545
    assert 0.04e6 <= params.param_count <= 0.07e6


def test_layer_order():
    names = [layer.name for layer in init_params(0)]
    assert names == [
        "stem",
        "col_a.1x3",
        "col_a.3x1",
        "col_a.3x3",
        "col_b.3x1",
        "col_b.1x3",
        "col_b.3x3",
        "head",
    ]
    params = init_params(0)
    assert params["col_a.1x3"].weight.shape == (32, 64, 1, 3)
    assert params["col_b.3x1"].weight.shape == (32, 64, 3, 1)
    assert params["head"].weight.shape == (1, 128, 1, 1)


def test_init_deterministic():
    a, b = init_params(7), init_params(7)
    for x, y in zip(a.arrays(), b.arrays()):
        assert_array_equal(x, y)
    c = init_params(8)
    assert not np.array_equal(a["stem"].weight, c["stem"].weight)


def test_init_statistics():
    params = init_params(0)
    weights = np.concatenate([layer.weight.ravel() for layer in params])[:10000]
    assert 0.0097 <= weights.std() <= 0.0103
    for layer in params:
        assert not layer.bias.any()


def test_params_validate_manifest():
    params = init_params(0)
    layers = params.layers[:-1]
    with pytest.raises(DimensionError, match="layer names"):
        ModelParams(layers)
    bad = params.copy()
    bad.layers[0] = Layer("stem", np.zeros((64, 3, 3, 3)), np.zeros(64), bad.layers[0].spec)
    with pytest.raises(DimensionError, match="stem"):
        ModelParams(bad.layers)


def test_params_copy_is_independent():
    params = init_params(0)
    copy = params.copy()
    copy["head"].bias[0] = 1.0
    assert params["head"].bias[0] == 0.0


@pytest.mark.parametrize("size", [(16, 16), (16, 32), (48, 64), (64, 64), (128, 96), (256, 256)])
def test_forward_output_is_half_size(size):
    h, w = size
    image = np.random.default_rng(0).random((1, 3, h, w))
    out = forward(init_params(0), image)
    assert out.shape == (1, 1, h // 2, w // 2)


def test_forward_batch_and_odd_sizes():
    out = forward(init_params(0), np.random.default_rng(0).random((2, 3, 9, 11)))
    assert out.shape == (2, 1, 5, 6)


def test_forward_deterministic():
    params = init_params(3)
    image = np.random.default_rng(1).random((1, 3, 16, 16))
    assert_array_equal(forward(params, image), forward(params, image))


def test_forward_undersized():
    with pytest.raises(ConfigurationError, match="minimum"):
        forward(init_params(0), np.zeros((1, 3, 7, 16)))


@pytest.mark.parametrize("shape", [(3, 16, 16), (1, 1, 16, 16), (1, 4, 16, 16)])
def test_forward_bad_input(shape):
    with pytest.raises(DimensionError):
        forward(init_params(0), np.zeros(shape))


def test_forward_zero_weights():
    params = init_params(0).zeros_like()
    out = forward(params, np.random.default_rng(0).random((1, 3, 16, 16)))
    assert not out.any()


def test_forward_float32():
    params = init_params(0).astype(np.float32)
    out = forward(params, np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32))
    assert out.dtype == np.float32


def test_forward_translation_covariant():
    params = init_params(0, std=0.1)
    first = np.zeros((1, 3, 32, 32))
    first[0, :, 12, 12] = 1.0
    second = np.zeros((1, 3, 32, 32))
    second[0, :, 12, 14] = 1.0
    out1, out2 = forward(params, first), forward(params, second)
    assert_allclose(out2[..., 1:], out1[..., :-1], atol=1e-12)
    assert not out2[..., 0].any()
    peak1 = np.unravel_index(np.abs(out1).argmax(), out1.shape)
    peak2 = np.unravel_index(np.abs(out2).argmax(), out2.shape)
    assert peak2[3] == peak1[3] + 1 and peak2[2] == peak1[2]


def test_backward_gradient_layout():
    params = init_params(0, std=0.1)
    out, cache = forward_with_cache(params, np.random.default_rng(0).random((2, 3, 8, 10)))
    grads = backward(params, cache, np.ones_like(out))
    assert grads.array_names() == params.array_names()
    for g, p in zip(grads.arrays(), params.arrays()):
        assert g.shape == p.shape
    assert grads["head"].bias[0] == out.size


def test_count_from_density():
    assert count_from_density(np.zeros((8, 8))) == 0.0
    dots = DotMap(40, 40, np.random.default_rng(0).uniform(5, 35, size=(7, 2)))
    assert count_from_density(render_density(dots)) == pytest.approx(7.0, abs=1e-6)


def test_count_from_density_regions_tile():
    density = np.random.default_rng(0).random((10, 12))
    whole = count_from_density(density)
    left = count_from_density(density, (0, 0, 10, 5))
    right = count_from_density(density, (0, 5, 10, 12))
    assert left + right == pytest.approx(whole, rel=1e-14)
    assert count_from_density(density, (3, 3, 3, 8)) == 0.0


@pytest.mark.parametrize("region", [(0, 0, 11, 12), (-1, 0, 5, 5), (5, 5, 4, 8)])
def test_count_from_density_out_of_bounds(region):
    with pytest.raises(RegionError):
        count_from_density(np.zeros((10, 12)), region)
    with pytest.raises(IndexError):
        count_from_density(np.zeros((10, 12)), region)


def test_predict_counts_threads():
    params = init_params(0, std=0.1)
    rng = np.random.default_rng(0)
    images = [rng.random((3, 16, 16)), rng.random((3, 12, 20)), rng.random((3, 16, 16))]
    single = predict_counts(params, images)
    threaded = predict_counts(params, images, threads=3)
    for (d1, c1), (d2, c2) in zip(single, threaded):
        assert_array_equal(d1, d2)
        assert c1 == c2
    assert single[1][0].shape == (6, 10)
    assert all(arr.flags.writeable for arr in params.arrays())


def test_complexity_report():
    params = init_params(0)
    report = complexity_report(params, 64, 64)
    assert report.param_count == 60545
    assert report.model_bytes == 60545 * 8
    stem = 64 * 64 * 64 * 3 * 25
    columns = 32 * 32 * (32 * 64 * 3 + 32 * 32 * 3 + 64 * 32 * 9) * 2
    head = 32 * 32 * 128
    assert report.mac_count == stem + columns + head


def test_complexity_report_scales_with_area():
    params = init_params(0)
    base = complexity_report(params, 64, 64).mac_count
    assert complexity_report(params, 128, 64).mac_count == 2 * base
    assert complexity_report(params, 128, 128).mac_count == 4 * base


def test_complexity_report_lines():
    text = "\n".join(complexity_report(init_params(0), 512, 640).lines())
    assert "60545" in text
    assert f"reference: {REFERENCE_COMPLEXITY['params_m']} M" in text
    assert f"reference: {REFERENCE_COMPLEXITY['gmacs']} GMACs" in text
    assert "ambiguous" in text


@pytest.mark.parametrize("shape", [(64, 48), (17, 23)])
def test_complexity_report_output_scale(shape):
    params = init_params(0)
    report = complexity_report(params, *shape)
    out = forward(params, np.zeros((1, 3) + shape))
    assert (report.output_h, report.output_w) == out.shape[2:]
    assert report.output_scale == pytest.approx(out.shape[2] / shape[0])


def test_complexity_report_prints_output_scale():
    text = "\n".join(complexity_report(init_params(0), 512, 640).lines())
    assert "output             256x320 (scale 0.5)" in text
    assert f"reference: scale {REFERENCE_COMPLEXITY['output_scale']}" in text


def test_param_count_matches_serialized(tmp_path):
    params = init_params(0)
    save_checkpoint(params, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert sum(a.size for a in loaded.arrays()) == complexity_report(params, 8, 8).param_count


def test_smaller_architecture():
    params = init_params(0, small_architecture)
    assert params.param_count == small_architecture.param_count()
    assert params.param_count < 60545
    assert forward(params, np.zeros((1, 3, 8, 8))).shape == (1, 1, 4, 4)
