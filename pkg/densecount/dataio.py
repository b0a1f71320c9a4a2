"""Images, annotations, augmentation and synthetic scenes.

Images are float64 arrays of shape (3, H, W) with values in [0, 1].

Annotation files hold one object per line: ``x y`` for a point or
``x1 y1 x2 y2`` for a bounding box (converted to its center). Blank lines and
``#`` comments are ignored. A manifest is comma-separated text with the columns
``image_path,annotation_path[,altitude]``; relative paths are resolved against
the manifest's directory and an optional header row is skipped.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import AnnotationError, ConfigurationError, GenerationError, LoadError
from .groundtruth import DotMap

__all__ = [
    "Sample",
    "AnnotationRecord",
    "AugmentationConfig",
    "SceneSpec",
    "boxes_to_dots",
    "augment",
    "synth_scene",
    "load_image",
    "save_image",
    "read_annotations",
    "write_annotations",
    "read_manifest",
    "load_dataset",
    "save_dataset",
    "synth_dataset",
]

log = logging.getLogger(__name__)

MANIFEST_HEADER = ["image_path", "annotation_path", "altitude"]


@dataclass
class Sample:
    """One training or evaluation item."""

    sample_id: str
    image: np.ndarray
    dotmap: DotMap

    @property
    def count(self):
        return self.dotmap.count


@dataclass
class AnnotationRecord:
    """Raw annotations of one image: points, boxes or both.

    Boxes are ``(x1, y1, x2, y2)`` with ``x1 < x2`` and ``y1 < y2`` inside the
    image.
    """

    image_path: str
    image_w: int
    image_h: int
    points: list = field(default_factory=list)
    boxes: list = field(default_factory=list)
    altitude_m: Optional[float] = None


def boxes_to_dots(record):
    """Convert an annotation record to a ``DotMap``, one dot per box center.

    Points already present in the record are kept ahead of the box centers.

    Examples
    --------
    >>> rec = AnnotationRecord("a.png", 40, 40, boxes=[(10, 10, 20, 20)])
    >>> boxes_to_dots(rec).points.tolist()
    [[15.0, 15.0]]
    """
    centers = []
    for index, box in enumerate(record.boxes):
        if len(box) != 4:
            raise AnnotationError(f"box {index} must have 4 values, got {len(box)}", index)
        x1, y1, x2, y2 = (float(v) for v in box)
        if not (x1 < x2 and y1 < y2):
            raise AnnotationError(f"box {index} {tuple(box)} is degenerate", index)
        if x1 < 0 or y1 < 0 or x2 > record.image_w or y2 > record.image_h:
            raise AnnotationError(
                f"box {index} {tuple(box)} exceeds the "
                f"{record.image_w}x{record.image_h} image",
                index,
            )
        centers.append(((x1 + x2) / 2.0, (y1 + y2) / 2.0))
    points = [tuple(float(v) for v in p) for p in record.points] + centers
    return DotMap(
        record.image_w,
        record.image_h,
        np.array(points, dtype=np.float64).reshape(-1, 2),
        record.altitude_m,
        Path(record.image_path).stem,
    )


@dataclass(frozen=True)
class AugmentationConfig:
    """Random photometric and geometric changes applied per training draw.

    Parameters
    ----------
    horizontal_flip_prob : float, default 0.5
    brightness_delta_range : (float, float), default (-0.2, 0.2)
        Constant added to every pixel, in units of the [0, 1] value range.
    contrast_factor_range : (float, float), default (0.8, 1.25)
        Factor applied to the deviation from the image mean.
    seed : int, default 0
    """

    horizontal_flip_prob: float = 0.5
    brightness_delta_range: tuple = (-0.2, 0.2)
    contrast_factor_range: tuple = (0.8, 1.25)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ConfigurationError(
                f"horizontal_flip_prob must be in [0, 1], got {self.horizontal_flip_prob}"
            )
        for name in ("brightness_delta_range", "contrast_factor_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ConfigurationError(f"{name} must be ordered, got ({low}, {high})")
        if self.contrast_factor_range[0] <= 0:
            raise ConfigurationError("contrast factors must be positive")

    @classmethod
    def disabled(cls, seed=0):
        return cls(0.0, (0.0, 0.0), (1.0, 1.0), seed)


def augment(image, dotmap, config, draw_seed):
    """Apply a random flip, brightness shift and contrast change.

    The draws depend only on ``(config.seed, draw_seed)``. Photometric changes
    leave the annotations untouched; results are clipped to [0, 1].

    Returns
    -------
    image, dotmap
    """
    _, h, w = image.shape
    if (w, h) != (dotmap.image_w, dotmap.image_h):
        raise ConfigurationError(
            f"image is {w}x{h} but its annotations are for "
            f"{dotmap.image_w}x{dotmap.image_h}"
        )
    rng = np.random.default_rng([config.seed, draw_seed])
    flip = rng.random() < config.horizontal_flip_prob
    delta = rng.uniform(*config.brightness_delta_range)
    factor = rng.uniform(*config.contrast_factor_range)

    if flip:
        image = image[:, :, ::-1]
        dotmap = dotmap.flipped()
    if delta != 0.0 or factor != 1.0:
        mean = image.mean()
        image = np.clip((image - mean) * factor + mean + delta, 0.0, 1.0)
    return np.ascontiguousarray(image), dotmap


@dataclass(frozen=True)
class SceneSpec:
    """Settings of a synthetic scene of bright blobs on a noisy background.

    ``min_separation`` defaults to twice the largest blob radius; it is halved
    up to ``relaxations`` times when blobs cannot be placed.
    """

    width: int = 64
    height: int = 64
    n_objects: int = 10
    object_radius_range: tuple = (1.5, 3.0)
    background_noise: float = 0.05
    seed: int = 0
    min_separation: Optional[float] = None
    relaxations: int = 3
    max_attempts: int = 2000

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(
                f"scene size must be positive, got {self.width}x{self.height}"
            )
        if self.n_objects < 0:
            raise ConfigurationError("n_objects must be nonnegative")
        low, high = self.object_radius_range
        if not 0 < low <= high:
            raise ConfigurationError(f"invalid object_radius_range ({low}, {high})")
        if self.background_noise < 0:
            raise ConfigurationError("background_noise must be nonnegative")


def _place_points(spec, rng):
    separation = (
        spec.min_separation
        if spec.min_separation is not None
        else 2.0 * spec.object_radius_range[1]
    )
    for _ in range(spec.relaxations + 1):
        points = []
        tries = 0
        while len(points) < spec.n_objects and tries < spec.max_attempts:
            tries += 1
            candidate = rng.uniform([0.0, 0.0], [spec.width - 1, spec.height - 1])
            if all(math.dist(candidate, p) >= separation for p in points):
                points.append(candidate)
        if len(points) == spec.n_objects:
            return np.array(points, dtype=np.float64).reshape(-1, 2)
        log.debug(
            "placed %d of %d objects with separation %.3g, relaxing",
            len(points),
            spec.n_objects,
            separation,
        )
        separation /= 2.0
    raise GenerationError(
        f"cannot place {spec.n_objects} objects in a {spec.width}x{spec.height} scene; "
        "lower the object count or the minimum separation"
    )


def synth_scene(spec):
    """Generate a labeled synthetic scene.

    Objects are Gaussian intensity bumps centered on the returned dots over
    seeded background noise. Pixel values are quantized to 8-bit levels so the
    scene survives a round trip through an image file unchanged.

    Returns
    -------
    image : ndarray of shape (3, height, width)
    dotmap : DotMap
    """
    rng = np.random.default_rng(spec.seed)
    points = _place_points(spec, rng)
    base = rng.uniform(0.15, 0.35, size=(3, 1, 1))
    image = base + spec.background_noise * rng.standard_normal((3, spec.height, spec.width))
    rows = np.arange(spec.height)[:, None]
    cols = np.arange(spec.width)[None, :]
    for x, y in points:
        radius = rng.uniform(*spec.object_radius_range)
        color = rng.uniform(0.5, 0.8, size=(3, 1, 1))
        bump = np.exp(-((cols - x) ** 2 + (rows - y) ** 2) / (2.0 * (radius / 2.0) ** 2))
        image = image + color * bump
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    dotmap = DotMap(spec.width, spec.height, points, None, f"synth-{spec.seed}")
    return image, dotmap


def load_image(path):
    """Read an image file as a (3, H, W) float64 array in [0, 1].

    Grayscale images are replicated to three channels.
    """
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise LoadError("image file not found", path=path) from None
    except OSError as exc:
        raise LoadError(f"cannot read image ({exc})", path=path) from None
    return rgb.transpose(2, 0, 1) / 255.0


def save_image(image, path):
    """Write a (3, H, W) [0, 1] image, 8-bit quantized; format from the suffix."""
    pixels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path)


def read_annotations(path, image_w, image_h, altitude_m=None, image_path=""):
    """Parse an annotation file into an ``AnnotationRecord``."""
    record = AnnotationRecord(str(image_path), image_w, image_h, altitude_m=altitude_m)
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except FileNotFoundError:
        raise LoadError("annotation file not found", path=path) from None
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            values = [float(v) for v in text.replace(",", " ").split()]
        except ValueError:
            raise LoadError(f"cannot parse '{text}'", path=path, line=lineno) from None
        if len(values) == 2:
            record.points.append(tuple(values))
        elif len(values) == 4:
            record.boxes.append(tuple(values))
        else:
            raise LoadError(
                f"expected 2 (point) or 4 (box) values, got {len(values)}",
                path=path,
                line=lineno,
            )
    return record


def write_annotations(dotmap, path):
    """Write the points of a ``DotMap``, one ``x y`` line each, at full precision."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for x, y in dotmap.points:
            f.write(f"{float(x)!r} {float(y)!r}\n")


def read_manifest(manifest_path):
    """Rows of a manifest as ``(image_path, annotation_path, altitude, line)``."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError("manifest not found", path=manifest_path)
    root = manifest_path.parent
    rows = []
    with open(manifest_path, encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            row = [cell.strip() for cell in row]
            if not row or not any(row) or row[0].startswith("#"):
                continue
            if [cell.lower() for cell in row[:2]] == MANIFEST_HEADER[:2]:
                continue
            if len(row) not in (2, 3):
                raise LoadError(
                    f"expected 2 or 3 columns, got {len(row)}", path=manifest_path, line=lineno
                )
            altitude = None
            if len(row) == 3 and row[2]:
                try:
                    altitude = float(row[2])
                except ValueError:
                    raise LoadError(
                        f"invalid altitude '{row[2]}'", path=manifest_path, line=lineno
                    ) from None
            rows.append((root / row[0], root / row[1], altitude, lineno))
    return rows


def load_dataset(manifest_path):
    """Load every image and its annotations listed in a manifest.

    Images are loaded whole at native resolution. Box annotations become dots
    at the box centers.

    Returns
    -------
    list of Sample, in manifest order
    """
    samples = []
    for image_path, annotation_path, altitude, lineno in read_manifest(manifest_path):
        if not Path(image_path).exists():
            raise LoadError(
                f"image '{image_path}' not found", path=manifest_path, line=lineno
            )
        image = load_image(image_path)
        _, h, w = image.shape
        record = read_annotations(annotation_path, w, h, altitude, image_path)
        try:
            dotmap = boxes_to_dots(record)
        except AnnotationError as exc:
            raise LoadError(str(exc), path=annotation_path) from exc
        samples.append(Sample(Path(image_path).stem, image, dotmap))
    log.debug("loaded %d samples from %s", len(samples), manifest_path)
    return samples


def save_dataset(samples, out_dir, image_suffix=".ppm"):
    """Write images, annotation files and a manifest for ``samples``.

    Returns
    -------
    Path of the written manifest
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for sample in samples:
            image_name = f"{sample.sample_id}{image_suffix}"
            annotation_name = f"{sample.sample_id}.txt"
            save_image(sample.image, out_dir / image_name)
            write_annotations(sample.dotmap, out_dir / annotation_name)
            altitude = sample.dotmap.altitude_m
            writer.writerow(
                [image_name, annotation_name, "" if altitude is None else repr(altitude)]
            )
    return manifest


def synth_dataset(n_scenes, base_spec, prefix="scene"):
    """Generate ``n_scenes`` scenes, seeded ``base_spec.seed + i``.

    The object count of scene ``i`` cycles through ``1 .. base_spec.n_objects``
    so the set spans easy and dense scenes.
    """
    samples = []
    for i in range(n_scenes):
        n_objects = 1 + (i % max(base_spec.n_objects, 1)) if base_spec.n_objects else 0
        spec = SceneSpec(
            base_spec.width,
            base_spec.height,
            n_objects,
            base_spec.object_radius_range,
            base_spec.background_noise,
            base_spec.seed + i,
            base_spec.min_separation,
            base_spec.relaxations,
            base_spec.max_attempts,
        )
        image, dotmap = synth_scene(spec)
        sample_id = f"{prefix}_{i:03d}"
        dotmap.source_id = sample_id
        samples.append(Sample(sample_id, image, dotmap))
    return samples
