"""Dense tensor operations for the counting network.

Tensors are plain ``numpy.ndarray`` objects in batch, channel, row, column order
(``NCHW``), C-contiguous. Training and verification run in float64; float32 is
accepted by the forward operations for inference benchmarking.

Convolution is cross-correlation (the kernel is not flipped).
"""
import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .decorators import check_finite
from .errors import ConfigurationError, DimensionError, TrainingError

__all__ = [
    "ConvSpec",
    "AdamState",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2x2",
    "maxpool2x2_backward",
    "relu",
    "relu_backward",
    "concat_channels",
    "concat_channels_backward",
    "adam_step",
    "grad_check",
    "format_tensor",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution.

    Parameters
    ----------
    out_channels : int
    kernel_h, kernel_w : int
    stride : int, default 1
    padding : tuple of 4 ints, default (0, 0, 0, 0)
        Pixels added as (top, bottom, left, right).
    bias : bool, default True
    """

    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: tuple = (0, 0, 0, 0)
    bias: bool = True

    def __post_init__(self):
        if self.out_channels < 1:
            raise ConfigurationError("out_channels must be at least 1")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigurationError(
                f"kernel extents must be at least 1, got {self.kernel_h}x{self.kernel_w}"
            )
        if self.stride < 1:
            raise ConfigurationError(f"stride must be at least 1, got {self.stride}")
        padding = tuple(int(p) for p in self.padding)
        if len(padding) != 4 or min(padding) < 0:
            raise ConfigurationError(
                "padding must be four nonnegative values (top, bottom, left, right)"
            )
        object.__setattr__(self, "padding", padding)

    @classmethod
    def same(cls, out_channels, kernel_h, kernel_w, bias=True):
        """Stride-1 convolution padded by floor(k / 2) on each side."""
        ph, pw = kernel_h // 2, kernel_w // 2
        return cls(out_channels, kernel_h, kernel_w, 1, (ph, ph, pw, pw), bias)

    def output_size(self, height, width):
        top, bottom, left, right = self.padding
        out_h = (height + top + bottom - self.kernel_h) // self.stride + 1
        out_w = (width + left + right - self.kernel_w) // self.stride + 1
        return out_h, out_w

    def weight_shape(self, in_channels):
        return (self.out_channels, in_channels, self.kernel_h, self.kernel_w)


def _check_4d(name, arr):
    if arr.ndim != 4:
        raise DimensionError(
            f"{name} must be 4-D (batch, channels, height, width), got shape {arr.shape}"
        )


def _check_conv_shapes(input, weights, spec):
    _check_4d("input", input)
    expected = spec.weight_shape(input.shape[1])
    if weights.shape != expected:
        raise DimensionError(
            f"weights shape {weights.shape} does not match {expected} for an input "
            f"with {input.shape[1]} channels"
        )
    out_h, out_w = spec.output_size(input.shape[2], input.shape[3])
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(
            f"convolution of a {input.shape[2]}x{input.shape[3]} input with a "
            f"{spec.kernel_h}x{spec.kernel_w} kernel gives an empty output"
        )
    return out_h, out_w


def _pad(input, spec):
    top, bottom, left, right = spec.padding
    if not any(spec.padding):
        return input
    return np.pad(input, [(0, 0), (0, 0), (top, bottom), (left, right)])


def _im2col(input, spec, out_h, out_w):
    # (N, C, H_out, W_out, kh, kw) -> (N * H_out * W_out, C * kh * kw)
    windows = sliding_window_view(_pad(input, spec), (spec.kernel_h, spec.kernel_w), axis=(2, 3))
    windows = windows[:, :, :: spec.stride, :: spec.stride][:, :, :out_h, :out_w]
    n, c = input.shape[:2]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, -1)


@check_finite
def conv2d_forward(input, weights, bias, spec):
    """2-D cross-correlation of a batch of feature maps.

    Parameters
    ----------
    input : ndarray of shape (N, C, H, W)
    weights : ndarray of shape (out_channels, C, kernel_h, kernel_w)
    bias : ndarray of shape (out_channels,) or None
    spec : ConvSpec

    Returns
    -------
    ndarray of shape (N, out_channels, H_out, W_out)

    Examples
    --------
    >>> x = np.ones((1, 1, 3, 3))
    >>> w = np.ones((1, 1, 3, 3))
    >>> conv2d_forward(x, w, None, ConvSpec.same(1, 3, 3, bias=False))[0, 0]
    array([[4., 6., 4.],
           [6., 9., 6.],
           [4., 6., 4.]])
    """
    out_h, out_w = _check_conv_shapes(input, weights, spec)
    n = input.shape[0]
    cols = _im2col(input, spec, out_h, out_w)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    if bias is not None:
        if bias.shape != (spec.out_channels,):
            raise DimensionError(
                f"bias shape {bias.shape} does not match ({spec.out_channels},)"
            )
        out += bias
    return np.ascontiguousarray(
        out.reshape(n, out_h, out_w, spec.out_channels).transpose(0, 3, 1, 2)
    )


@check_finite
def conv2d_backward(grad_out, saved_input, weights, spec):
    """Gradients of a convolution with respect to its input, weights and bias.

    Parameters
    ----------
    grad_out : ndarray of shape (N, out_channels, H_out, W_out)
    saved_input : ndarray
        The input of the matching forward call.
    weights : ndarray
    spec : ConvSpec

    Returns
    -------
    grad_input, grad_weights, grad_bias
        ``grad_bias`` is None when ``spec.bias`` is False.
    """
    out_h, out_w = _check_conv_shapes(saved_input, weights, spec)
    n, c, h, w = saved_input.shape
    expected = (n, spec.out_channels, out_h, out_w)
    if grad_out.shape != expected:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected}"
        )
    kh, kw, stride = spec.kernel_h, spec.kernel_w, spec.stride
    dout = grad_out.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)

    cols = _im2col(saved_input, spec, out_h, out_w)
    grad_weights = (dout.T @ cols).reshape(weights.shape)
    grad_bias = dout.sum(axis=0) if spec.bias else None

    # col2im: scatter each kernel tap back onto the padded input
    dcols = (dout @ weights.reshape(spec.out_channels, -1)).reshape(n, out_h, out_w, c, kh, kw)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
    top, bottom, left, right = spec.padding
    padded = np.zeros(
        (n, c, h + top + bottom, w + left + right), dtype=np.result_type(grad_out, weights)
    )
    for i in range(kh):
        i_max = i + stride * out_h
        for j in range(kw):
            j_max = j + stride * out_w
            padded[:, :, i:i_max:stride, j:j_max:stride] += dcols[:, :, i, j]
    grad_input = np.ascontiguousarray(padded[:, :, top : top + h, left : left + w])
    return grad_input, grad_weights, grad_bias


def _pad_even(input):
    # replicate the last row/column of odd extents
    _, _, h, w = input.shape
    if h % 2 == 0 and w % 2 == 0:
        return input
    return np.pad(input, [(0, 0), (0, 0), (0, h % 2), (0, w % 2)], mode="edge")


@check_finite
def maxpool2x2(input):
    """2x2 max pooling with stride 2.

    Odd extents are padded by replicating the last row or column, so the output
    has ``ceil(H / 2)`` rows and ``ceil(W / 2)`` columns.

    Returns
    -------
    output : ndarray of shape (N, C, ceil(H/2), ceil(W/2))
    argmax : ndarray of int8
        Position (0..3, row-major) of the maximum inside each window; ties go to
        the first position.

    Examples
    --------
    >>> out, _ = maxpool2x2(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    >>> out
    array([[[[4.]]]])
    """
    _check_4d("input", input)
    padded = _pad_even(input)
    n, c, h, w = padded.shape
    windows = padded.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1).astype(np.int8)
    output = np.take_along_axis(windows, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
    return output, argmax


def maxpool2x2_backward(grad_out, argmax, input_shape):
    """Route each output gradient to the input position that held the maximum."""
    if grad_out.shape != argmax.shape:
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match pooled shape {argmax.shape}"
        )
    n, c, h, w = input_shape
    ph, pw = h + h % 2, w + w % 2
    if (ph // 2, pw // 2) != grad_out.shape[2:]:
        raise DimensionError(
            f"input shape {tuple(input_shape)} does not pool to {grad_out.shape}"
        )
    windows = np.zeros(grad_out.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(windows, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    grad = windows.reshape(n, c, ph // 2, pw // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    grad = grad.reshape(n, c, ph, pw)
    if ph != h:
        grad[:, :, h - 1, :] += grad[:, :, h, :]
    if pw != w:
        grad[:, :, :, w - 1] += grad[:, :, :, w]
    return np.ascontiguousarray(grad[:, :, :h, :w])


def relu(input):
    """Elementwise max(0, x).

    Examples
    --------
    >>> relu(np.array([-1.0, 0.0, 2.0]))
    array([0., 0., 2.])
    """
    return np.maximum(input, 0.0)


def relu_backward(grad_out, saved_output):
    return np.where(saved_output > 0.0, grad_out, 0.0)


def concat_channels(a, b):
    """Concatenate two feature maps along the channel axis."""
    _check_4d("a", a)
    _check_4d("b", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"cannot concatenate shapes {a.shape} and {b.shape}: batch and spatial "
            "extents must agree"
        )
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out, a_channels):
    """Split a gradient back into the two concatenated inputs."""
    return grad_out[:, :a_channels], grad_out[:, a_channels:]


@dataclass
class AdamState:
    """Moment estimates of the Adam optimizer.

    ``first_moment`` and ``second_moment`` hold one array per parameter array, in
    the order of ``ModelParams.arrays()``.
    """

    first_moment: list
    second_moment: list
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params, **kwargs):
        arrays = params.arrays()
        return cls(
            first_moment=[np.zeros_like(a) for a in arrays],
            second_moment=[np.zeros_like(a) for a in arrays],
            **kwargs,
        )


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update to ``params`` in place.

    Parameters
    ----------
    params : ModelParams
    grads : ModelParams
        Gradients with the same layout as ``params``.
    state : AdamState
        Updated in place.

    Returns
    -------
    params, state
    """
    p_arrays, g_arrays = params.arrays(), grads.arrays()
    names = params.array_names()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(state.first_moment):
        raise DimensionError("gradients and optimizer state must match the parameters")
    for name, p, g, m in zip(names, p_arrays, g_arrays, state.first_moment):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(
                f"{name}: gradient shape {g.shape} does not match parameter {p.shape}"
            )
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in layer '{name}'", layer=name)

    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    step_size = state.lr / bc1
    for p, g, m, v in zip(p_arrays, g_arrays, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def grad_check(closure, params, input, target, n_coords=200, h=1e-5, seed=0, tolerance=1e-4):
    """Compare analytic gradients against central finite differences.

    Parameters
    ----------
    closure : callable
        ``closure(params, input, target) -> (loss, grads)`` where ``grads`` has
        the layout of ``params``.
    params : ModelParams
        Must hold float64 arrays. Perturbed coordinates are restored afterwards.
    input, target : ndarray
    n_coords : int, default 200
        Number of randomly drawn parameter coordinates (all of them if fewer).
    h : float, default 1e-5
    seed : int, default 0
    tolerance : float, default 1e-4
        A warning is logged when the result exceeds this value.

    Returns
    -------
    float
        Maximum relative error ``|a - n| / max(|a| + |n|, 1e-12)`` over the
        checked coordinates.
    """
    arrays = params.arrays()
    if any(a.dtype != np.float64 for a in arrays):
        raise ConfigurationError("gradient checking requires float64 parameters")
    _, grads = closure(params, input, target)
    grad_arrays = grads.arrays()
    sizes = np.array([a.size for a in arrays])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    flat_indices = rng.choice(total, size=min(n_coords, total), replace=False)

    max_error = 0.0
    for flat in np.sort(flat_indices):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        arr, idx = arrays[k].reshape(-1), int(flat - offsets[k])
        original = arr[idx]
        arr[idx] = original + h
        loss_plus, _ = closure(params, input, target)
        arr[idx] = original - h
        loss_minus, _ = closure(params, input, target)
        arr[idx] = original
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        analytic = grad_arrays[k].reshape(-1)[idx]
        error = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-12)
        max_error = max(max_error, float(error))

    if max_error > tolerance:
        log.warning(
            "gradient check failed: max relative error %.3g exceeds %.3g",
            max_error,
            tolerance,
        )
    return max_error


def format_tensor(tensor, precision=6):
    """Render a tensor as plain text, one 2-D grid per (batch, channel) slice."""
    arr = np.asarray(tensor)
    if arr.ndim < 2:
        arr = arr.reshape(1, -1)
    lead = arr.shape[:-2]
    lines = [f"# shape {tuple(np.asarray(tensor).shape)} dtype {arr.dtype}"]
    for index in np.ndindex(*lead):
        if lead:
            lines.append(f"# slice {index}")
        for row in arr[index]:
            lines.append(" ".join(f"{v:.{precision}g}" for v in row))
    return "\n".join(lines)
