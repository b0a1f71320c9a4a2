"""Plain ``key = value`` configuration files.

Files have no sections; ``#`` and ``;`` start comments. Density settings may
appear in any file under a ``density.`` prefix. Values given on the command
line override file values, which override the dataclass defaults.

Density keys::

    density.mode = fixed | altitude | adaptive | per_image
    density.sigma = 4.0                      # fixed
    density.bands = 0:30:6.0, 30:60:4.0      # altitude, min:max:sigma
    density.k = 3                            # adaptive
    density.beta = 1.0
    density.fallback_sigma = 4.0
    density.table = img_001:3.5, img_002:5.0 # per_image
    density.default_sigma = 4.0
    density.truncation = 4.0
    density.renormalize = true
"""
import configparser
from pathlib import Path

from .dataio import AugmentationConfig, SceneSpec
from .errors import ConfigurationError
from .groundtruth import (
    AdaptiveKNNSigma,
    AltitudeBand,
    AltitudeGroupedSigma,
    DensityConfig,
    FixedSigma,
    PerImageSigma,
    SigmaMode,
)
from .metrics import GridSetting, SSIMConfig, SSIMMode
from .trainer import TrainConfig

__all__ = [
    "read_config",
    "density_config",
    "train_config",
    "metrics_config",
    "scene_config",
]

_SECTION = "densecount"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_config(path):
    """Read a key-value file into a dict of lower-cased keys to strings."""
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), delimiters=("=",)
    )
    parser.optionxform = str.lower
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"config file '{path}' not found") from None
    try:
        parser.read_string(f"[{_SECTION}]\n{text}", source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config file '{path}': {exc}") from None
    return dict(parser[_SECTION])


class _Values:
    """Typed access to config values with the key named in every error."""

    def __init__(self, values, prefix=""):
        self.values = {k: v for k, v in values.items() if v is not None}
        self.prefix = prefix

    def raw(self, key):
        return self.values.get(self.prefix + key)

    def _convert(self, key, convert, default, kind):
        raw = self.raw(key)
        if raw is None or raw == "":
            return default
        try:
            return convert(raw)
        except (TypeError, ValueError):
            raise ConfigurationError(
                f"'{self.prefix + key}' must be {kind}, got '{raw}'"
            ) from None

    def float(self, key, default=None):
        return self._convert(key, float, default, "a number")

    def int(self, key, default=None):
        return self._convert(key, int, default, "an integer")

    def str(self, key, default=None):
        return self._convert(key, str, default, "text")

    def bool(self, key, default=None):
        raw = self.raw(key)
        if raw is None or raw == "":
            return default
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigurationError(f"'{self.prefix + key}' must be on/off, got '{raw}'")

    def pair(self, key, default):
        raw = self.raw(key)
        if raw is None or raw == "":
            return default
        try:
            low, high = (float(v) for v in str(raw).replace(",", " ").split())
        except ValueError:
            raise ConfigurationError(
                f"'{self.prefix + key}' must be two numbers, got '{raw}'"
            ) from None
        return (low, high)


def _split_items(raw):
    return [item.strip() for item in str(raw).split(",") if item.strip()]


def density_config(values):
    """Build a ``DensityConfig`` from ``density.``-prefixed keys."""
    v = _Values(values, "density.")
    try:
        mode = SigmaMode.get_value(v.str("mode", "fixed"))
    except ValueError as exc:
        raise ConfigurationError(f"'density.mode': {exc}") from None
    if mode == SigmaMode.fixed:
        sigma_mode = FixedSigma(v.float("sigma", FixedSigma.sigma))
    elif mode == SigmaMode.adaptive:
        defaults = AdaptiveKNNSigma()
        sigma_mode = AdaptiveKNNSigma(
            v.int("k", defaults.k),
            v.float("beta", defaults.beta),
            v.float("fallback_sigma", defaults.fallback_sigma),
        )
    elif mode == SigmaMode.altitude:
        raw = v.raw("bands")
        if not raw:
            raise ConfigurationError(
                "altitude-grouped sigma needs 'density.bands' (min:max:sigma, ...)"
            )
        bands = []
        for item in _split_items(raw):
            try:
                low, high, sigma = (float(x) for x in item.split(":"))
            except ValueError:
                raise ConfigurationError(
                    f"altitude band '{item}' must be min:max:sigma"
                ) from None
            bands.append(AltitudeBand(low, high, sigma))
        sigma_mode = AltitudeGroupedSigma(tuple(bands))
    else:
        table = []
        for item in _split_items(v.raw("table") or ""):
            source_id, _, sigma = item.rpartition(":")
            try:
                table.append((source_id, float(sigma)))
            except ValueError:
                raise ConfigurationError(f"sigma table entry '{item}' must be id:sigma") from None
        sigma_mode = PerImageSigma(tuple(table), v.float("default_sigma", PerImageSigma.default))
    return DensityConfig(
        sigma_mode,
        v.float("truncation", 4.0),
        v.bool("renormalize", True),
    )


def train_config(values):
    """Build a ``TrainConfig`` (with its density and augmentation settings)."""
    v = _Values(values)
    defaults = TrainConfig()
    seed = v.int("seed", defaults.seed)
    augmentation = None
    if v.bool("augmentation", True):
        aug_defaults = AugmentationConfig()
        augmentation = AugmentationConfig(
            v.float("flip_prob", aug_defaults.horizontal_flip_prob),
            v.pair("brightness_range", aug_defaults.brightness_delta_range),
            v.pair("contrast_range", aug_defaults.contrast_factor_range),
            seed,
        )
    return TrainConfig(
        lr=v.float("lr", defaults.lr),
        batch_size=v.int("batch_size", defaults.batch_size),
        max_epochs=v.int("max_epochs", defaults.max_epochs),
        eval_every=v.int("eval_every", defaults.eval_every),
        seed=seed,
        curriculum=v.bool("curriculum", defaults.curriculum),
        oracle=v.str("oracle", defaults.oracle),
        oracle_path=v.str("oracle_path", defaults.oracle_path),
        augmentation=augmentation,
        density=density_config(values),
        init_std=v.float("init_std", defaults.init_std),
        grid=_grid(v),
    )


def _grid(v):
    level = v.int("game_level")
    if level is not None:
        return GridSetting.power(level)
    return GridSetting(v.int("grid_rows", 4), v.int("grid_cols", 4))


def metrics_config(values):
    """Grid, SSIM settings and PSNR peak for evaluation.

    Returns
    -------
    dict with keys ``grid``, ``ssim``, ``psnr_max`` and ``density``
    """
    v = _Values(values)
    try:
        mode = SSIMMode.get_value(v.str("ssim_mode", "global"))
    except ValueError as exc:
        raise ConfigurationError(f"'ssim_mode': {exc}") from None
    ssim = SSIMConfig(
        mode=mode,
        window_size=v.int("ssim_window", 11),
        dynamic_range=v.float("ssim_range"),
        c1=v.float("ssim_c1"),
        c2=v.float("ssim_c2"),
    )
    return {
        "grid": _grid(v),
        "ssim": ssim,
        "psnr_max": v.float("psnr_max"),
        "density": density_config(values),
    }


def scene_config(values):
    """Scene settings and scene count of a synthetic-data spec file.

    Returns
    -------
    (n_scenes, SceneSpec)
    """
    v = _Values(values)
    defaults = SceneSpec()
    spec = SceneSpec(
        width=v.int("width", defaults.width),
        height=v.int("height", defaults.height),
        n_objects=v.int("n_objects", defaults.n_objects),
        object_radius_range=v.pair("radius_range", defaults.object_radius_range),
        background_noise=v.float("noise", defaults.background_noise),
        seed=v.int("seed", defaults.seed),
        min_separation=v.float("min_separation", defaults.min_separation),
    )
    n_scenes = v.int("n_scenes", 1)
    if n_scenes < 0:
        raise ConfigurationError("n_scenes must be nonnegative")
    return n_scenes, spec
