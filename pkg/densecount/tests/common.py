import numpy as np

from densecount.dataio import SceneSpec, synth_dataset
from densecount.groundtruth import DotMap
from densecount.model import Architecture


def direct_conv(input, weights, bias, spec):
    """Quadruple-loop cross-correlation used as a reference."""
    top, bottom, left, right = spec.padding
    padded = np.pad(input, [(0, 0), (0, 0), (top, bottom), (left, right)])
    n, c, _, _ = input.shape
    out_h, out_w = spec.output_size(input.shape[2], input.shape[3])
    out = np.zeros((n, spec.out_channels, out_h, out_w))
    for b in range(n):
        for o in range(spec.out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    r, s = i * spec.stride, j * spec.stride
                    window = padded[b, :, r : r + spec.kernel_h, s : s + spec.kernel_w]
                    out[b, o, i, j] = np.sum(window * weights[o])
                    if bias is not None:
                        out[b, o, i, j] += bias[o]
    return out


def numeric_grad(f, x, h=1e-5):
    """Central differences of the scalar function ``f`` at every element of ``x``."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f()
        flat[i] = original - h
        minus = f()
        flat[i] = original
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad


class ScalarParams:
    """Single named parameter array with the ``ModelParams`` optimizer interface."""

    def __init__(self, value, name="w"):
        self.value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        self.name = name

    def arrays(self):
        return [self.value]

    def array_names(self):
        return [self.name]


def random_dotmap(rng, width=32, height=32, max_points=10, source_id="random"):
    n = rng.integers(0, max_points + 1)
    points = rng.uniform([0.0, 0.0], [width, height], size=(n, 2))
    return DotMap(width, height, points, None, source_id)


def small_scenes(n_scenes=4, size=16, n_objects=3, seed=0):
    spec = SceneSpec(size, size, n_objects, (1.0, 2.0), 0.05, seed, min_separation=2.0)
    return synth_dataset(n_scenes, spec)


small_architecture = Architecture(stem_filters=32)
