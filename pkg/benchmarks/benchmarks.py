"""
densecount benchmarks

These are run using asv: "pip install asv"

To run a specific suite within the existing environment, e.g., ModelSuite:
$ asv run -b ModelSuite -E 'existing'
"""

import numpy as np

from densecount import (
    AdaptiveKNNSigma,
    conv2d_backward,
    conv2d_forward,
    ConvSpec,
    DensityConfig,
    DotMap,
    evaluate_maps,
    forward,
    forward_with_cache,
    init_params,
    render_density,
    ssim,
    SSIMConfig,
)


class ConvSuite:
    """3x3 convolution of a 64-channel 128x160 feature map"""

    def setup(self):
        rng = np.random.default_rng(0)
        self.spec = ConvSpec.same(32, 3, 3)
        self.input = rng.random((1, 64, 128, 160))
        self.weights = rng.standard_normal((32, 64, 3, 3)) * 0.01
        self.bias = np.zeros(32)
        self.grad_out = rng.random((1, 32, 128, 160))

    def time_forward(self):
        conv2d_forward(self.input, self.weights, self.bias, self.spec)

    def time_backward(self):
        conv2d_backward(self.grad_out, self.input, self.weights, self.spec)


class ModelSuite:
    """Full network on a single 256x320 image"""

    params = ["float32", "float64"]
    param_names = ["precision"]

    def setup(self, precision):
        self.model = init_params(0).astype(precision)
        self.image = np.random.default_rng(0).random((1, 3, 256, 320)).astype(precision)

    def time_forward(self, precision):
        forward(self.model, self.image)

    def time_forward_with_cache(self, precision):
        forward_with_cache(self.model, self.image)


class RenderSuite:
    """Ground-truth rendering of 500 points on a 512x640 image"""

    def setup(self):
        points = np.random.default_rng(0).uniform([0, 0], [640, 512], size=(500, 2))
        self.dotmap = DotMap(640, 512, points)
        self.adaptive = DensityConfig(AdaptiveKNNSigma())

    def time_fixed_sigma(self):
        render_density(self.dotmap)

    def time_adaptive_sigma(self):
        render_density(self.dotmap, self.adaptive)


class MetricsSuite:
    """Evaluation metrics on 20 pairs of 256x320 maps"""

    def setup(self):
        rng = np.random.default_rng(0)
        self.items = [
            (f"img{i}", rng.random((256, 320)), rng.random((256, 320))) for i in range(20)
        ]
        self.windowed = SSIMConfig("windowed", window_size=11)

    def time_ssim_global(self):
        ssim(self.items[0][1], self.items[0][2])

    def time_ssim_windowed(self):
        ssim(self.items[0][1], self.items[0][2], self.windowed)

    def time_evaluate_maps(self):
        evaluate_maps(self.items)
