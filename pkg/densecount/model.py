"""The fixed two-column counting network.

Graph::

    image (N, 3, H, W)
      -> stem 5x5 conv, ReLU -> 2x2 max-pool
      -> column A: 1x3 -> 3x1 -> 3x3 convs, ReLU after each
      -> column B: 3x1 -> 1x3 -> 3x3 convs, ReLU after each
      -> channel concat -> 1x1 conv (linear) -> density (N, 1, H/2, W/2)

Both columns read the pooled stem output. Every convolution is stride 1 and
same-padded, so the only downsampling is the max-pool.
"""
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decorators import multithreading_enabled
from .errors import ConfigurationError, DimensionError, RegionError
from .numerics import (
    concat_channels,
    concat_channels_backward,
    conv2d_backward,
    conv2d_forward,
    ConvSpec,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
)

__all__ = [
    "Architecture",
    "Layer",
    "ModelParams",
    "ComplexityReport",
    "REFERENCE_COMPLEXITY",
    "init_params",
    "forward",
    "forward_with_cache",
    "backward",
    "count_from_density",
    "predict_counts",
    "complexity_report",
]

log = logging.getLogger(__name__)

MIN_INPUT_SIZE = 8

# Published figures of the lightweight model, for side-by-side display only.
REFERENCE_COMPLEXITY = {"params_m": 0.05, "size_mb": 0.21, "gmacs": 4.85, "output_scale": 0.5}


@dataclass(frozen=True)
class Architecture:
    """Filter counts of the two-column network.

    The defaults give 60,545 parameters for RGB input.
    """

    in_channels: int = 3
    stem_filters: int = 64
    column_filters: int = 32
    column_out_filters: int = 64

    def layer_specs(self):
        """Ordered ``(name, in_channels, ConvSpec)`` triples."""
        stem, col, col_out = self.stem_filters, self.column_filters, self.column_out_filters
        return [
            ("stem", self.in_channels, ConvSpec.same(stem, 5, 5)),
            ("col_a.1x3", stem, ConvSpec.same(col, 1, 3)),
            ("col_a.3x1", col, ConvSpec.same(col, 3, 1)),
            ("col_a.3x3", col, ConvSpec.same(col_out, 3, 3)),
            ("col_b.3x1", stem, ConvSpec.same(col, 3, 1)),
            ("col_b.1x3", col, ConvSpec.same(col, 1, 3)),
            ("col_b.3x3", col, ConvSpec.same(col_out, 3, 3)),
            ("head", 2 * col_out, ConvSpec.same(1, 1, 1)),
        ]

    def manifest(self):
        """Text description of every layer shape, one per line."""
        lines = []
        for name, in_ch, spec in self.layer_specs():
            lines.append(
                f"{name} {spec.weight_shape(in_ch)} stride={spec.stride} "
                f"padding={spec.padding} bias={spec.bias}"
            )
        return "\n".join(lines)

    def manifest_hash(self):
        return hashlib.sha256(self.manifest().encode("utf-8")).digest()

    def param_count(self):
        total = 0
        for _, in_ch, spec in self.layer_specs():
            total += int(np.prod(spec.weight_shape(in_ch)))
            total += spec.out_channels if spec.bias else 0
        return total


@dataclass
class Layer:
    name: str
    weight: np.ndarray
    bias: np.ndarray
    spec: ConvSpec


@dataclass
class ModelParams:
    """Ordered layer weights and biases of the network.

    The same container holds gradients (see ``zeros_like``), so optimizer code
    walks both with ``arrays()``.
    """

    layers: list
    architecture: Architecture = field(default_factory=Architecture)

    def __post_init__(self):
        specs = self.architecture.layer_specs()
        if [layer.name for layer in self.layers] != [name for name, _, _ in specs]:
            raise DimensionError("layer names do not match the architecture manifest")
        for layer, (name, in_ch, spec) in zip(self.layers, specs):
            if layer.weight.shape != spec.weight_shape(in_ch):
                raise DimensionError(
                    f"{name}: weight shape {layer.weight.shape} does not match "
                    f"{spec.weight_shape(in_ch)}"
                )
            if layer.bias.shape != (spec.out_channels,):
                raise DimensionError(
                    f"{name}: bias shape {layer.bias.shape} does not match "
                    f"({spec.out_channels},)"
                )

    def __getitem__(self, name):
        for layer in self:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def __iter__(self):
        return iter(self.layers)

    def arrays(self):
        """Weight and bias arrays interleaved in layer order."""
        out = []
        for layer in self:
            out.extend([layer.weight, layer.bias])
        return out

    def array_names(self):
        out = []
        for layer in self:
            out.extend([f"{layer.name}.weight", f"{layer.name}.bias"])
        return out

    @property
    def param_count(self):
        return sum(a.size for a in self.arrays())

    @property
    def manifest_hash(self):
        return self.architecture.manifest_hash()

    def copy(self):
        return ModelParams(
            [Layer(l.name, l.weight.copy(), l.bias.copy(), l.spec) for l in self],
            self.architecture,
        )

    def zeros_like(self):
        return ModelParams(
            [
                Layer(l.name, np.zeros_like(l.weight), np.zeros_like(l.bias), l.spec)
                for l in self
            ],
            self.architecture,
        )

    def astype(self, dtype):
        return ModelParams(
            [
                Layer(l.name, l.weight.astype(dtype), l.bias.astype(dtype), l.spec)
                for l in self
            ],
            self.architecture,
        )


def init_params(seed, architecture=None, std=0.01):
    """Draw initial parameters.

    Weights come from a zero-mean Gaussian with standard deviation ``std``;
    biases are zero.

    Parameters
    ----------
    seed : int
    architecture : Architecture, optional
    std : float, default 0.01

    Returns
    -------
    ModelParams
    """
    architecture = architecture or Architecture()
    rng = np.random.default_rng(seed)
    layers = []
    for name, in_ch, spec in architecture.layer_specs():
        weight = rng.normal(0.0, std, size=spec.weight_shape(in_ch))
        layers.append(Layer(name, weight, np.zeros(spec.out_channels), spec))
    return ModelParams(layers, architecture)


def _check_image(params, image):
    if image.ndim != 4:
        raise DimensionError(
            f"image batch must be 4-D (batch, channels, height, width), got {image.shape}"
        )
    in_channels = params.architecture.in_channels
    if image.shape[1] != in_channels:
        raise DimensionError(f"expected {in_channels} input channels, got {image.shape[1]}")
    if min(image.shape[2:]) < MIN_INPUT_SIZE:
        raise ConfigurationError(
            f"input of {image.shape[2]}x{image.shape[3]} pixels is smaller than the "
            f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} minimum"
        )


def _conv(params, name, x, cache):
    layer = params[name]
    out = conv2d_forward(x, layer.weight, layer.bias, layer.spec)
    if cache is not None:
        cache[name] = x
    return out


def _column(params, prefix, names, x, cache):
    for name in names:
        x = relu(_conv(params, f"{prefix}.{name}", x, cache))
        if cache is not None:
            cache[f"{prefix}.{name}:out"] = x
    return x


def forward_with_cache(params, image):
    """Forward pass that also returns the activations needed by ``backward``."""
    _check_image(params, image)
    dtype = image.dtype if image.dtype == np.float32 else np.float64
    image = image.astype(dtype, copy=False)
    cache = {"input_shape": image.shape}

    stem = relu(_conv(params, "stem", image, cache))
    cache["stem:out"] = stem
    pooled, argmax = maxpool2x2(stem)
    cache["pool:argmax"] = argmax

    a = _column(params, "col_a", ("1x3", "3x1", "3x3"), pooled, cache)
    b = _column(params, "col_b", ("3x1", "1x3", "3x3"), pooled, cache)
    merged = concat_channels(a, b)
    out = _conv(params, "head", merged, cache)
    cache["merged_a_channels"] = a.shape[1]
    return out, cache


def forward(params, image):
    """Predict density maps for a batch of images.

    Parameters
    ----------
    params : ModelParams
    image : ndarray of shape (N, 3, H, W)
        H and W must be at least 8.

    Returns
    -------
    ndarray of shape (N, 1, ceil(H/2), ceil(W/2))
    """
    out, _ = forward_with_cache(params, image)
    return out


def _column_backward(params, prefix, names, grad, cache, grads):
    for name in reversed(names):
        key = f"{prefix}.{name}"
        grad = relu_backward(grad, cache[f"{key}:out"])
        layer = params[key]
        grad, gw, gb = conv2d_backward(grad, cache[key], layer.weight, layer.spec)
        grads[key].weight[...] = gw
        grads[key].bias[...] = gb
    return grad


def backward(params, cache, grad_out):
    """Gradients of a scalar loss with respect to every parameter.

    Parameters
    ----------
    params : ModelParams
    cache : dict
        Activations from ``forward_with_cache``.
    grad_out : ndarray
        Gradient of the loss with respect to the forward output.

    Returns
    -------
    ModelParams
        Gradients, laid out like ``params``.
    """
    grads = params.zeros_like()
    head = params["head"]
    grad, gw, gb = conv2d_backward(grad_out, cache["head"], head.weight, head.spec)
    grads["head"].weight[...] = gw
    grads["head"].bias[...] = gb

    grad_a, grad_b = concat_channels_backward(grad, cache["merged_a_channels"])
    grad_pooled = _column_backward(params, "col_a", ("1x3", "3x1", "3x3"), grad_a, cache, grads)
    grad_pooled = grad_pooled + _column_backward(
        params, "col_b", ("3x1", "1x3", "3x3"), grad_b, cache, grads
    )

    stem_out = cache["stem:out"]
    grad = maxpool2x2_backward(grad_pooled, cache["pool:argmax"], stem_out.shape)
    grad = relu_backward(grad, stem_out)
    stem = params["stem"]
    _, gw, gb = conv2d_backward(grad, cache["stem"], stem.weight, stem.spec)
    grads["stem"].weight[...] = gw
    grads["stem"].bias[...] = gb
    return grads


def count_from_density(density, region=None):
    """Integrate a density map, optionally over a rectangle.

    Parameters
    ----------
    density : ndarray
        2-D map, or any array whose last two axes are rows and columns.
    region : tuple (row0, col0, row1, col1), optional
        Half-open pixel rectangle. The whole map when omitted.

    Returns
    -------
    float

    Examples
    --------
    >>> count_from_density(np.ones((4, 4)), region=(0, 0, 2, 4))
    8.0
    """
    density = np.asarray(density)
    if region is None:
        return float(density.sum())
    row0, col0, row1, col1 = region
    h, w = density.shape[-2:]
    if not (0 <= row0 <= row1 <= h and 0 <= col0 <= col1 <= w):
        raise RegionError(f"region {tuple(region)} lies outside a {h}x{w} map")
    return float(density[..., row0:row1, col0:col1].sum())


@multithreading_enabled
def predict_counts(params, images, threads=1):
    """Predict one density map per image and its count.

    Parameters are frozen read-only while the workers run.

    Parameters
    ----------
    params : ModelParams
    images : sequence of ndarray of shape (3, H, W)
        Images may differ in size.
    threads : int, default 1

    Returns
    -------
    list of (density map, count) pairs in input order
    """

    def predict(image):
        density = forward(params, image[None])[0, 0]
        return density, count_from_density(density)

    if threads <= 1:
        return [predict(image) for image in images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(predict, images))


@dataclass(frozen=True)
class ComplexityReport:
    param_count: int
    mac_count: int
    model_bytes: int
    input_h: int
    input_w: int
    output_h: int
    output_w: int

    @property
    def output_scale(self):
        return self.output_h / self.input_h

    def lines(self):
        ref = REFERENCE_COMPLEXITY
        return [
            f"input              {self.input_h}x{self.input_w}",
            f"output             {self.output_h}x{self.output_w} (scale {self.output_scale:g})"
            f"   reference: scale {ref['output_scale']}",
            f"parameters         {self.param_count} ({self.param_count / 1e6:.4f} M)"
            f"   reference: {ref['params_m']} M",
            f"model size         {self.model_bytes} bytes ({self.model_bytes / 1e6:.3f} MB)"
            f"   reference: {ref['size_mb']} MB",
            f"multiply-adds      {self.mac_count} ({self.mac_count / 1e9:.3f} GMACs)"
            f"   reference: {ref['gmacs']} GMACs",
            "note: the reference layer description is ambiguous; the implemented "
            "manifest (rectangular column filters, 1-channel 1x1 head) gives the count above",
        ]


def complexity_report(params, input_h, input_w, bytes_per_value=8):
    """Count parameters, multiply-accumulates and serialized size.

    MACs of a convolution are ``output elements x in_channels x kh x kw`` for a
    single image; bias additions and pooling are not counted.

    Returns
    -------
    ComplexityReport
    """
    architecture = params.architecture
    h, w = input_h, input_w
    macs = 0
    for name, in_ch, spec in architecture.layer_specs():
        out_h, out_w = spec.output_size(h, w)
        macs += out_h * out_w * spec.out_channels * in_ch * spec.kernel_h * spec.kernel_w
        if name == "stem":
            h, w = (out_h + 1) // 2, (out_w + 1) // 2
    param_count = params.param_count
    return ComplexityReport(
        param_count=param_count,
        mac_count=macs,
        model_bytes=param_count * bytes_per_value,
        input_h=input_h,
        input_w=input_w,
        output_h=h,
        output_w=w,
    )
