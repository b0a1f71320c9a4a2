"""Counting and density-map quality metrics.

All functions take 2-D maps (rows, columns). ``MetricReport`` collects the
per-image values and their dataset means.
"""
import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from ._enum import ParamEnum
from .errors import ConfigurationError, DimensionError

__all__ = [
    "GridSetting",
    "SSIMMode",
    "SSIMConfig",
    "ImageMetrics",
    "MetricReport",
    "mae",
    "game",
    "ssim",
    "psnr",
    "evaluate_maps",
]


def _check_pair(pred_map, gt_map):
    pred_map = np.asarray(pred_map, dtype=np.float64)
    gt_map = np.asarray(gt_map, dtype=np.float64)
    if pred_map.shape != gt_map.shape:
        raise DimensionError(
            f"prediction shape {pred_map.shape} does not match ground truth {gt_map.shape}"
        )
    if pred_map.ndim != 2:
        raise DimensionError(f"maps must be 2-D, got shape {pred_map.shape}")
    if pred_map.size == 0:
        raise DimensionError("maps must not be empty")
    return pred_map, gt_map


def mae(pairs):
    """Mean absolute error between predicted and true counts.

    Parameters
    ----------
    pairs : sequence of (pred_count, gt_count)

    Examples
    --------
    >>> mae([(12, 10), (17, 20)])
    2.5
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("mean absolute error needs at least one image")
    return float(np.mean([abs(float(e) - float(g)) for e, g in pairs]))


@dataclass(frozen=True)
class GridSetting:
    """Patch grid of the grid average mean absolute error.

    Use ``GridSetting.power(L)`` for a 2^L x 2^L grid (4^L patches) or
    ``GridSetting(rows, cols)`` for an explicit grid. Rows and columns that do
    not divide evenly go to the last patch.

    A ``2r x 2c`` grid refines an ``r x c`` grid, and so never gives a smaller
    GAME, when ``height // r == 2 * (height // (2 * r))`` and likewise for the
    columns, in particular when ``2r`` and ``2c`` divide the map. Otherwise the
    remainder patches of the two grids cut the map differently.
    """

    rows: int = 4
    cols: int = 4

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @classmethod
    def power(cls, level):
        if level < 0:
            raise ConfigurationError(f"grid level must be nonnegative, got {level}")
        return cls(2**level, 2**level)

    def edges(self, height, width):
        if self.rows > height or self.cols > width:
            raise ConfigurationError(
                f"a {self.rows}x{self.cols} grid does not fit a {height}x{width} map"
            )
        row_edges = [i * (height // self.rows) for i in range(self.rows)] + [height]
        col_edges = [j * (width // self.cols) for j in range(self.cols)] + [width]
        return row_edges, col_edges

    def __str__(self):
        return f"{self.rows}x{self.cols}"


def game(pred_map, gt_map, grid=None):
    """Grid average mean absolute error of a single image.

    The sum over patches of the absolute difference between predicted and true
    patch counts. Average it over images for the dataset value.

    Parameters
    ----------
    pred_map, gt_map : ndarray
    grid : GridSetting, default 4x4

    Examples
    --------
    >>> game(np.ones((4, 4)), np.zeros((4, 4)), GridSetting.power(0))
    16.0
    """
    pred_map, gt_map = _check_pair(pred_map, gt_map)
    grid = grid or GridSetting()
    row_edges, col_edges = grid.edges(*gt_map.shape)
    total = 0.0
    for r0, r1 in zip(row_edges, row_edges[1:]):
        for c0, c1 in zip(col_edges, col_edges[1:]):
            total += abs(float(pred_map[r0:r1, c0:c1].sum()) - float(gt_map[r0:r1, c0:c1].sum()))
    return total


class SSIMMode(ParamEnum):
    global_stats = "global"
    windowed = "windowed"


@dataclass(frozen=True)
class SSIMConfig:
    """Structural similarity settings.

    Without an explicit ``dynamic_range`` the range is the largest value of
    both maps (1.0 when both maps are all zero), and the constants are
    ``c1 = (0.01 * range)^2``, ``c2 = (0.03 * range)^2``. ``c1`` and ``c2``
    override the derived constants when given.
    """

    mode: SSIMMode = SSIMMode.global_stats
    window_size: int = 11
    dynamic_range: float = None
    c1: float = None
    c2: float = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SSIMMode.get_value(self.mode))
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ConfigurationError(
                f"window_size must be a positive odd number, got {self.window_size}"
            )
        for name in ("dynamic_range", "c1", "c2"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")

    def value_range(self, pred_map, gt_map):
        if self.dynamic_range is not None:
            return self.dynamic_range
        value_range = float(max(pred_map.max(), gt_map.max()))
        return value_range if value_range > 0 else 1.0

    def constants(self, pred_map, gt_map):
        value_range = self.value_range(pred_map, gt_map)
        c1 = self.c1 if self.c1 is not None else (0.01 * value_range) ** 2
        c2 = self.c2 if self.c2 is not None else (0.03 * value_range) ** 2
        return c1, c2

    def window_for(self, shape):
        """Largest odd square window no bigger than ``window_size`` or the map."""
        size = min(self.window_size, *shape)
        return size if size % 2 else size - 1

    def describe(self):
        if self.mode == SSIMMode.windowed:
            return f"windowed({self.window_size})"
        return "global"


def _ssim_formula(mu_x, mu_y, var_x, var_y, cov, c1, c2):
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )


def ssim(pred_map, gt_map, config=None):
    """Structural similarity between two maps.

    ``global`` mode evaluates the formula on whole-map means, variances and
    covariance. ``windowed`` mode averages it over every position of a uniform
    square window that fits in the map, using population statistics. A window
    larger than the map shrinks to the largest odd size that fits.

    Examples
    --------
    >>> x = np.arange(16.0).reshape(4, 4)
    >>> ssim(x, x)
    1.0
    """
    pred_map, gt_map = _check_pair(pred_map, gt_map)
    config = config or SSIMConfig()
    c1, c2 = config.constants(pred_map, gt_map)
    if config.mode == SSIMMode.global_stats:
        mu_x, mu_y = pred_map.mean(), gt_map.mean()
        dx, dy = pred_map - mu_x, gt_map - mu_y
        value = _ssim_formula(
            mu_x, mu_y, (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean(), c1, c2
        )
        return float(value)

    win_size = config.window_for(gt_map.shape)
    value_range = config.value_range(pred_map, gt_map)
    return float(
        structural_similarity(
            pred_map,
            gt_map,
            win_size=win_size,
            data_range=value_range,
            K1=math.sqrt(c1) / value_range,
            K2=math.sqrt(c2) / value_range,
            use_sample_covariance=False,
        )
    )


def psnr(pred_map, gt_map, max_value=None):
    """Peak signal-to-noise ratio in dB.

    ``max_value`` defaults to the largest ground-truth value. Identical maps
    give ``math.inf``.

    Examples
    --------
    >>> round(psnr(np.full((2, 2), 0.9), np.ones((2, 2)), max_value=1.0), 9)
    20.0
    """
    pred_map, gt_map = _check_pair(pred_map, gt_map)
    peak = float(gt_map.max()) if max_value is None else float(max_value)
    if not peak > 0:
        raise ConfigurationError(f"PSNR needs a positive peak value, got {peak}")
    mse = float(np.mean((pred_map - gt_map) ** 2))
    if mse == 0.0:
        return math.inf
    return float(10.0 * math.log10(peak**2 / mse))


@dataclass
class ImageMetrics:
    sample_id: str
    gt_count: float
    pred_count: float
    abs_err: float
    game: float
    ssim: float
    psnr: float
    game_levels: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    """Per-image metrics, dataset means and the settings used."""

    per_image: list
    mae: float
    game: float
    mean_ssim: float
    mean_psnr: float
    game_levels: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_table(self):
        """Human-readable report."""
        lines = ["# " + ", ".join(f"{k}={v}" for k, v in self.config.items())]
        header = (
            f"{'sample':<20} {'gt':>10} {'pred':>10} {'abs_err':>10} "
            f"{'game':>10} {'ssim':>8} {'psnr':>8}"
        )
        lines.append(header)
        lines.append("-" * len(header))
        for m in self.per_image:
            lines.append(
                f"{m.sample_id:<20} {m.gt_count:>10.3f} {m.pred_count:>10.3f} "
                f"{m.abs_err:>10.3f} {m.game:>10.3f} {m.ssim:>8.4f} {m.psnr:>8.2f}"
            )
        lines.append("-" * len(header))
        lines.append(f"MAE        {self.mae:.4f}")
        lines.append(f"GAME({self.config.get('grid', '')}) {self.game:.4f}")
        for level, value in self.game_levels.items():
            lines.append(f"GAME(L={level})  {value:.4f}")
        lines.append(f"SSIM       {self.mean_ssim:.4f}")
        lines.append(f"PSNR       {self.mean_psnr:.2f} dB")
        return "\n".join(lines) + "\n"

    def to_delimited(self, delimiter="\t"):
        """Machine-readable report: a config comment, one row per image, a mean row."""
        buffer = io.StringIO()
        buffer.write("# " + " ".join(f"{k}={v}" for k, v in self.config.items()) + "\n")
        writer = csv.writer(buffer, delimiter=delimiter, lineterminator="\n")
        levels = list(self.game_levels)
        writer.writerow(
            ["sample_id", "gt_count", "pred_count", "abs_err", "game", "ssim", "psnr"]
            + [f"game_l{level}" for level in levels]
        )
        for m in self.per_image:
            writer.writerow(
                [m.sample_id]
                + [
                    repr(float(v))
                    for v in (m.gt_count, m.pred_count, m.abs_err, m.game, m.ssim, m.psnr)
                ]
                + [repr(float(m.game_levels[level])) for level in levels]
            )
        writer.writerow(
            ["MEAN", "", ""]
            + [repr(v) for v in (self.mae, self.game, self.mean_ssim, self.mean_psnr)]
            + [repr(float(self.game_levels[level])) for level in levels]
        )
        return buffer.getvalue()

    def as_dict(self):
        return asdict(self)


def evaluate_maps(items, grid=None, ssim_config=None, psnr_max=None, game_levels=(0, 1, 2, 3)):
    """Compute every metric over ``(sample_id, pred_map, gt_map)`` triples.

    GAME levels that do not fit a map are skipped for the whole report.

    Returns
    -------
    MetricReport
    """
    items = list(items)
    if not items:
        raise ConfigurationError("evaluation needs at least one image")
    grid = grid or GridSetting()
    ssim_config = ssim_config or SSIMConfig()
    min_side = min(min(np.shape(gt)) for _, _, gt in items)
    levels = [level for level in game_levels if 2**level <= min_side]

    per_image = []
    for sample_id, pred_map, gt_map in items:
        pred_map, gt_map = _check_pair(pred_map, gt_map)
        gt_count, pred_count = float(gt_map.sum()), float(pred_map.sum())
        peak = psnr_max
        if peak is None and not gt_map.max() > 0:
            peak = 1.0
        per_image.append(
            ImageMetrics(
                sample_id,
                gt_count,
                pred_count,
                abs(pred_count - gt_count),
                game(pred_map, gt_map, grid),
                ssim(pred_map, gt_map, ssim_config),
                psnr(pred_map, gt_map, peak),
                {level: game(pred_map, gt_map, GridSetting.power(level)) for level in levels},
            )
        )

    finite_psnr = [m.psnr for m in per_image if math.isfinite(m.psnr)]
    return MetricReport(
        per_image=per_image,
        mae=mae((m.pred_count, m.gt_count) for m in per_image),
        game=float(np.mean([m.game for m in per_image])),
        mean_ssim=float(np.mean([m.ssim for m in per_image])),
        mean_psnr=float(np.mean(finite_psnr)) if finite_psnr else math.inf,
        game_levels={
            level: float(np.mean([m.game_levels[level] for m in per_image])) for level in levels
        },
        config={
            "grid": str(grid),
            "ssim": ssim_config.describe(),
            "ssim_c1": ssim_config.c1 if ssim_config.c1 is not None else "derived",
            "ssim_c2": ssim_config.c2 if ssim_config.c2 is not None else "derived",
            "psnr_max": psnr_max if psnr_max is not None else "gt_max",
        },
    )
