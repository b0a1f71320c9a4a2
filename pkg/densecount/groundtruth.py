"""Density maps from point annotations.

Each annotated point contributes a discrete Gaussian stamp. Point coordinates
are in pixel units with the center of pixel ``(row i, column j)`` at ``x = j``,
``y = i`` (the continuous pixel center ``j + 0.5`` shifted by the half-pixel
offset), so a horizontal flip maps ``x`` to ``width - 1 - x`` for points and
maps to reversing the columns for maps.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from ._enum import ParamEnum
from .errors import AnnotationError, ConfigurationError, DensecountWarning

__all__ = [
    "DotMap",
    "FixedSigma",
    "AltitudeBand",
    "AltitudeGroupedSigma",
    "AdaptiveKNNSigma",
    "PerImageSigma",
    "DensityConfig",
    "SigmaMode",
    "resolve_sigma",
    "resolve_sigmas",
    "render_density",
    "downscale_target",
]

log = logging.getLogger(__name__)


class SigmaMode(ParamEnum):
    fixed = "fixed"
    altitude = "altitude"
    adaptive = "adaptive"
    per_image = "per_image"


@dataclass
class DotMap:
    """Point annotations of one image.

    Parameters
    ----------
    image_w, image_h : int
    points : ndarray of shape (N, 2)
        ``(x, y)`` pixel coordinates inside ``[0, image_w) x [0, image_h)``.
        Points in the last half pixel of a row or column are snapped onto the
        last pixel center, so stored points lie in ``[0, image_w - 1] x
        [0, image_h - 1]`` and a horizontal flip is exact.
    altitude_m : float, optional
        Capture altitude in meters.
    source_id : str
    """

    image_w: int
    image_h: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    altitude_m: Optional[float] = None
    source_id: str = ""

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.size == 0:
            points = np.zeros((0, 2))
        if points.ndim != 2 or points.shape[1] != 2:
            raise AnnotationError(f"points must have shape (N, 2), got {points.shape}")
        if self.image_w < 1 or self.image_h < 1:
            raise AnnotationError(
                f"image size must be positive, got {self.image_w}x{self.image_h}"
            )
        inside = (
            (points[:, 0] >= 0)
            & (points[:, 0] < self.image_w)
            & (points[:, 1] >= 0)
            & (points[:, 1] < self.image_h)
        )
        if not inside.all():
            index = int(np.flatnonzero(~inside)[0])
            raise AnnotationError(
                f"point {index} at {tuple(points[index])} lies outside the "
                f"{self.image_w}x{self.image_h} image",
                index=index,
            )
        # the last half pixel snaps onto the last pixel center
        points[:, 0] = np.minimum(points[:, 0], self.image_w - 1)
        points[:, 1] = np.minimum(points[:, 1], self.image_h - 1)
        self.points = points

    def __len__(self):
        return len(self.points)

    @property
    def count(self):
        return len(self.points)

    def flipped(self):
        """Mirror the points horizontally (``x -> image_w - 1 - x``)."""
        points = self.points.copy()
        points[:, 0] = self.image_w - 1 - points[:, 0]
        return DotMap(self.image_w, self.image_h, points, self.altitude_m, self.source_id)


def _check_sigma(sigma, what="sigma"):
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ConfigurationError(f"{what} must be positive and finite, got {sigma}")


@dataclass(frozen=True)
class FixedSigma:
    sigma: float = 4.0

    def __post_init__(self):
        _check_sigma(self.sigma)


@dataclass(frozen=True)
class AltitudeBand:
    min_alt: float
    max_alt: float
    sigma: float

    def __post_init__(self):
        _check_sigma(self.sigma)
        if not self.min_alt < self.max_alt:
            raise ConfigurationError(
                f"altitude band [{self.min_alt}, {self.max_alt}) is empty"
            )


@dataclass(frozen=True)
class AltitudeGroupedSigma:
    """One sigma per altitude band.

    Bands must be contiguous: sorted by altitude, each ending where the next
    begins. A band covers ``[min_alt, max_alt)``; the last one includes its
    upper end.
    """

    bands: tuple

    def __post_init__(self):
        bands = tuple(sorted(self.bands, key=lambda band: band.min_alt))
        if not bands:
            raise ConfigurationError(
                "altitude-grouped sigma needs at least one altitude band"
            )
        for lower, upper in zip(bands, bands[1:]):
            if lower.max_alt != upper.min_alt:
                raise ConfigurationError(
                    f"altitude bands [{lower.min_alt}, {lower.max_alt}) and "
                    f"[{upper.min_alt}, {upper.max_alt}) overlap or leave a gap"
                )
        object.__setattr__(self, "bands", bands)

    def sigma_for(self, altitude_m):
        for band in self.bands:
            if band.min_alt <= altitude_m < band.max_alt:
                return band.sigma
        last = self.bands[-1]
        if altitude_m == last.max_alt:
            return last.sigma
        raise ConfigurationError(
            f"altitude {altitude_m} m is outside the configured bands "
            f"[{self.bands[0].min_alt}, {last.max_alt}]"
        )


@dataclass(frozen=True)
class AdaptiveKNNSigma:
    """Sigma = beta x mean distance to the k nearest other points.

    ``fallback_sigma`` is used (with a warning) for images with a single point
    and for points whose neighbors all coincide with them.
    """

    k: int = 3
    beta: float = 1.0
    fallback_sigma: float = 4.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be at least 1, got {self.k}")
        _check_sigma(self.beta, "beta")
        _check_sigma(self.fallback_sigma, "fallback_sigma")


@dataclass(frozen=True)
class PerImageSigma:
    """A sigma chosen per image, looked up by ``DotMap.source_id``."""

    table: tuple = ()
    default: float = 4.0

    def __post_init__(self):
        table = tuple(sorted(dict(self.table).items()))
        for source_id, sigma in table:
            _check_sigma(sigma, f"sigma of '{source_id}'")
        _check_sigma(self.default, "default sigma")
        object.__setattr__(self, "table", table)

    def sigma_for(self, source_id):
        return dict(self.table).get(source_id, self.default)


@dataclass(frozen=True)
class DensityConfig:
    """How density maps are rendered.

    Parameters
    ----------
    mode : FixedSigma, AltitudeGroupedSigma, AdaptiveKNNSigma or PerImageSigma
    truncation_radius_sigmas : float, default 4.0
        Stamps are cut off beyond this many sigmas from the point.
    renormalize : bool, default True
        Rescale every stamp so its in-image mass is exactly 1.
    """

    mode: object = field(default_factory=FixedSigma)
    truncation_radius_sigmas: float = 4.0
    renormalize: bool = True

    def __post_init__(self):
        if not isinstance(
            self.mode, (FixedSigma, AltitudeGroupedSigma, AdaptiveKNNSigma, PerImageSigma)
        ):
            raise ConfigurationError(f"unknown sigma mode {self.mode!r}")
        _check_sigma(self.truncation_radius_sigmas, "truncation_radius_sigmas")

    @property
    def mode_name(self):
        return {
            FixedSigma: SigmaMode.fixed,
            AltitudeGroupedSigma: SigmaMode.altitude,
            AdaptiveKNNSigma: SigmaMode.adaptive,
            PerImageSigma: SigmaMode.per_image,
        }[type(self.mode)].value


def _knn_sigmas(points, mode, source_id):
    n = len(points)
    if n < 2:
        warnings.warn(
            f"'{source_id}' has {n} point(s); adaptive sigma falls back to "
            f"{mode.fallback_sigma}",
            DensecountWarning,
            stacklevel=3,
        )
        return np.full(n, mode.fallback_sigma)
    k = min(mode.k, n - 1)
    # each point is its own nearest neighbor at distance 0
    distances, _ = cKDTree(points).query(points, k=k + 1)
    distances = np.sort(np.atleast_2d(distances), axis=1)[:, 1:]
    sigmas = mode.beta * distances.mean(axis=1)
    degenerate = sigmas <= 0
    if degenerate.any():
        warnings.warn(
            f"'{source_id}' has {int(degenerate.sum())} point(s) whose nearest "
            f"neighbors coincide with them; using sigma {mode.fallback_sigma}",
            DensecountWarning,
            stacklevel=3,
        )
        sigmas[degenerate] = mode.fallback_sigma
    return sigmas


def resolve_sigmas(dotmap, config):
    """Kernel width for every point of ``dotmap``.

    Returns
    -------
    ndarray of shape (N,)
    """
    mode = config.mode
    n = dotmap.count
    if isinstance(mode, FixedSigma):
        return np.full(n, mode.sigma)
    if isinstance(mode, PerImageSigma):
        return np.full(n, mode.sigma_for(dotmap.source_id))
    if isinstance(mode, AltitudeGroupedSigma):
        if dotmap.altitude_m is None:
            raise ConfigurationError(
                f"'{dotmap.source_id}' has no altitude, which altitude-grouped sigma needs"
            )
        return np.full(n, mode.sigma_for(dotmap.altitude_m))
    return _knn_sigmas(dotmap.points, mode, dotmap.source_id)


def resolve_sigma(dotmap, point_index, config):
    """Kernel width of a single point.

    Examples
    --------
    >>> dots = DotMap(20, 20, [(5.0, 5.0), (15.0, 5.0)])
    >>> resolve_sigma(dots, 0, DensityConfig(AdaptiveKNNSigma(k=1)))
    10.0
    """
    if not 0 <= point_index < dotmap.count:
        raise IndexError(f"point index {point_index} out of range for {dotmap.count} points")
    return float(resolve_sigmas(dotmap, config)[point_index])


def _stamp(x, y, sigma, radius, width, height, renormalize):
    # the nearest pixel center always lies inside the disc
    near_c = min(max(round(x), 0), width - 1)
    near_r = min(max(round(y), 0), height - 1)
    near_d2 = (near_r - y) ** 2 + (near_c - x) ** 2
    radius2 = max(radius**2, near_d2)
    radius = math.sqrt(radius2)

    # window of pixel centers within `radius` of the point
    cols = np.arange(math.floor(x - radius), math.ceil(x + radius) + 1)
    rows = np.arange(math.floor(y - radius), math.ceil(y + radius) + 1)
    d2 = (rows[:, None] - y) ** 2 + (cols[None, :] - x) ** 2
    # weights relative to the nearest center, which is exp(0) = 1
    kernel = np.exp(-(d2 - near_d2) / (2.0 * sigma**2))
    kernel[d2 > radius2] = 0.0
    kernel /= kernel.sum()

    keep_c = (cols >= 0) & (cols < width)
    keep_r = (rows >= 0) & (rows < height)
    clipped = kernel[np.ix_(keep_r, keep_c)]
    if renormalize:
        clipped = clipped / clipped.sum()
    return rows[keep_r], cols[keep_c], clipped


def render_density(dotmap, config=None):
    """Render the full-resolution density map of a set of points.

    Every point contributes a Gaussian stamp evaluated at pixel centers,
    truncated at ``truncation_radius_sigmas`` sigmas and normalized to unit
    mass. With ``renormalize`` on, border-clipped stamps are rescaled so the
    map integrates to exactly the number of points.

    Parameters
    ----------
    dotmap : DotMap
    config : DensityConfig, optional

    Returns
    -------
    ndarray of shape (image_h, image_w), float64

    Examples
    --------
    >>> dots = DotMap(32, 32, [(10.0, 12.0), (20.5, 3.0)])
    >>> round(render_density(dots).sum(), 9)
    2.0
    """
    config = config or DensityConfig()
    density = np.zeros((dotmap.image_h, dotmap.image_w))
    if dotmap.count == 0:
        return density
    sigmas = resolve_sigmas(dotmap, config)
    for (x, y), sigma in zip(dotmap.points, sigmas):
        # the pixel holding the point always receives mass
        radius = max(config.truncation_radius_sigmas * sigma, 1.0)
        rows, cols, stamp = _stamp(
            x, y, sigma, radius, dotmap.image_w, dotmap.image_h, config.renormalize
        )
        if stamp.size:
            density[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] += stamp
    return density


def downscale_target(density):
    """Halve a density map by 2x2 sum pooling, preserving its mass.

    Odd extents are padded with zeros, so the result has ``ceil(H / 2)`` rows
    and ``ceil(W / 2)`` columns, matching the network output.

    Examples
    --------
    >>> downscale_target(np.array([[0.1, 0.2], [0.3, 0.4]]))
    array([[1.]])
    """
    density = np.asarray(density, dtype=np.float64)
    h, w = density.shape[-2:]
    pad = [(0, 0)] * (density.ndim - 2) + [(0, h % 2), (0, w % 2)]
    padded = np.pad(density, pad)
    ph, pw = padded.shape[-2:]
    blocks = padded.reshape(padded.shape[:-2] + (ph // 2, 2, pw // 2, 2))
    return blocks.sum(axis=(-3, -1))
