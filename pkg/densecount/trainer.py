"""Training loop: squared-error loss over curriculum-ordered mini-batches.

The loss of a batch of ``B`` images is ``(1 / B) * sum_i ||pred_i - target_i||^2``
with the squared norm summed over pixels, so its gradient with respect to the
prediction is ``2 * (pred - target) / B``. Targets are half-resolution density
maps produced by ``render_density`` followed by ``downscale_target``.
"""
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .curriculum import (
    build_plan,
    CountProxy,
    CurriculumPlan,
    FileOracle,
    OracleName,
    score_samples,
    TeacherError,
)
from .dataio import augment, AugmentationConfig
from .errors import ConfigurationError, DimensionError, TrainingError
from .groundtruth import DensityConfig, downscale_target, render_density
from .io import load_checkpoint
from .metrics import evaluate_maps, GridSetting
from .model import backward, forward_with_cache, init_params, predict_counts
from .numerics import adam_step, AdamState, format_tensor

__all__ = [
    "TrainConfig",
    "LogEntry",
    "TrainingLog",
    "loss",
    "train",
    "evaluate",
    "curriculum_comparison",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training settings.

    Parameters
    ----------
    lr : float, default 1e-4
    batch_size : int, default 4
    max_epochs : int, default 100
    eval_every : int, default 1
        Evaluate (and possibly keep as best) every this many epochs; 0 disables
        evaluation and the final parameters are returned.
    seed : int, default 0
    curriculum : bool, default True
    oracle : {"count", "teacher", "file"}, default "count"
    oracle_path : str, optional
        Teacher checkpoint or score file for the "teacher" and "file" oracles.
    augmentation : AugmentationConfig, optional
        None disables augmentation.
    density : DensityConfig
    init_std : float, default 0.01
    grid : GridSetting, default 4x4
    """

    lr: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 100
    eval_every: int = 1
    seed: int = 0
    curriculum: bool = True
    oracle: str = "count"
    oracle_path: Optional[str] = None
    augmentation: Optional[AugmentationConfig] = field(default_factory=AugmentationConfig)
    density: DensityConfig = field(default_factory=DensityConfig)
    init_std: float = 0.01
    grid: GridSetting = field(default_factory=GridSetting)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.eval_every < 0:
            raise ConfigurationError("max_epochs and eval_every must be nonnegative")
        object.__setattr__(self, "oracle", OracleName.get_value(self.oracle).value)
        if self.oracle != "count" and self.curriculum and not self.oracle_path:
            raise ConfigurationError(f"the '{self.oracle}' oracle needs oracle_path")


@dataclass(frozen=True)
class LogEntry:
    step: int
    epoch: int
    batch_id: int
    loss: float
    lr: float
    wall_ms: float
    sample_ids: tuple = ()


@dataclass
class TrainingLog:
    """Per-step losses, per-evaluation metrics and the realized batch order."""

    entries: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    plan: Optional[CurriculumPlan] = None
    best_epoch: Optional[int] = None
    best_mae: float = math.inf

    @property
    def steps(self):
        return len(self.entries)

    def epoch_batches(self, epoch):
        return [entry.sample_ids for entry in self.entries if entry.epoch == epoch]

    def nonmonotone_windows(self, window=200, smoothing=20):
        """Start steps of ``window``-step spans over which the smoothed loss rose."""
        losses = np.array([entry.loss for entry in self.entries])
        if len(losses) < window + smoothing:
            return []
        smoothed = np.convolve(losses, np.ones(smoothing) / smoothing, mode="valid")
        starts = []
        for start in range(0, len(smoothed) - window, window):
            if smoothed[start + window] > smoothed[start]:
                starts.append(start)
        return starts

    def to_delimited(self, delimiter="\t", timings=True):
        """Per-step rows, then the evaluations.

        With ``timings=False`` the ``wall_ms`` column is left out, so equal
        seeds give byte-identical text.
        """
        buffer = io.StringIO()
        writer = csv.writer(buffer, delimiter=delimiter, lineterminator="\n")
        columns = ["step", "epoch", "batch_id", "loss", "lr"]
        writer.writerow(columns + ["wall_ms"] if timings else columns)
        for e in self.entries:
            row = [e.step, e.epoch, e.batch_id, repr(e.loss), repr(e.lr)]
            writer.writerow(row + [f"{e.wall_ms:.3f}"] if timings else row)
        if self.evaluations:
            buffer.write("\n# evaluations\n")
            writer.writerow(["epoch", "step", "mae", "game"])
            for ev in self.evaluations:
                writer.writerow([ev["epoch"], ev["step"], repr(ev["mae"]), repr(ev["game"])])
        return buffer.getvalue()

    def timings_to_delimited(self, delimiter="\t"):
        buffer = io.StringIO()
        writer = csv.writer(buffer, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["step", "wall_ms"])
        for e in self.entries:
            writer.writerow([e.step, f"{e.wall_ms:.3f}"])
        return buffer.getvalue()


def loss(pred, target):
    """Batch-averaged squared error and its gradient with respect to ``pred``.

    Examples
    --------
    >>> value, grad = loss(np.full((1, 1, 2, 2), 1.5), np.ones((1, 1, 2, 2)))
    >>> value
    1.0
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} does not match target {target.shape}")
    n_batch = pred.shape[0] if pred.ndim == 4 else 1
    diff = pred - target
    return float(np.sum(diff * diff) / n_batch), 2.0 * diff / n_batch


def _model_loss(params, images, targets):
    out, cache = forward_with_cache(params, images)
    value, grad = loss(out, targets)
    return value, backward(params, cache, grad)


class _Targets:
    """Half-resolution targets, cached per (sample, flipped)."""

    def __init__(self, config):
        self.config = config
        self._cache = {}

    def get(self, sample_id, dotmap, flipped):
        key = (sample_id, flipped)
        if key not in self._cache:
            self._cache[key] = downscale_target(render_density(dotmap, self.config))
        return self._cache[key]


def _make_oracle(config):
    name = config.oracle
    if name == "count":
        return CountProxy()
    if name == "file":
        return FileOracle(config.oracle_path)
    return TeacherError.from_params(load_checkpoint(config.oracle_path))


def _shuffled_batches(ids, batch_size, seed, epoch):
    rng = np.random.default_rng([seed, epoch])
    order = [ids[i] for i in rng.permutation(len(ids))]
    return [tuple(order[i : i + batch_size]) for i in range(0, len(order), batch_size)]


def evaluate(
    params,
    samples,
    density=None,
    grid=None,
    ssim_config=None,
    psnr_max=None,
    threads=1,
    self_eval=False,
):
    """Predict every sample and compare against its half-resolution ground truth.

    With ``self_eval`` the ground truth is used as the prediction, which checks
    the evaluation pipeline itself (MAE 0, SSIM 1).

    Returns
    -------
    MetricReport
    """
    density = density or DensityConfig()
    targets = [downscale_target(render_density(s.dotmap, density)) for s in samples]
    if self_eval:
        predictions = [t.copy() for t in targets]
    else:
        predictions = [d for d, _ in predict_counts(params, [s.image for s in samples], threads)]
    items = [(s.sample_id, p, t) for s, p, t in zip(samples, predictions, targets)]
    return evaluate_maps(items, grid=grid, ssim_config=ssim_config, psnr_max=psnr_max)


def train(dataset, config, validation=None, teacher=None, threads=1):
    """Train a network from scratch.

    Parameters
    ----------
    dataset : list of Sample
    config : TrainConfig
    validation : list of Sample, optional
        Used for best-checkpoint selection; defaults to the training set.
    teacher : callable, optional
        Difficulty oracle overriding ``config.oracle``.
    threads : int, default 1
        Worker threads for scoring and evaluation.

    Returns
    -------
    params : ModelParams
        The parameters with the lowest validation MAE (the final ones when
        evaluation is disabled).
    log : TrainingLog
    """
    if not dataset:
        raise ConfigurationError("cannot train on an empty dataset")
    ids = [s.sample_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("sample ids must be unique")
    by_id = {s.sample_id: s for s in dataset}
    position_of = {sample_id: i for i, sample_id in enumerate(ids)}
    params = init_params(config.seed, std=config.init_std)
    training_log = TrainingLog()
    if config.max_epochs == 0:
        return params, training_log

    batch_size = config.batch_size
    if len({s.image.shape for s in dataset}) > 1 and batch_size > 1:
        log.warning("images differ in size; training with batch size 1")
        batch_size = 1

    if config.curriculum:
        oracle = teacher if teacher is not None else _make_oracle(config)
        scores = score_samples(oracle, dataset, threads)
        plan = build_plan(scores, batch_size, config.seed)
        training_log.plan = plan
        log.info(
            "curriculum: %d batches, batch mean scores %s",
            len(plan.batches),
            ", ".join(f"{m:.3g}" for m in plan.batch_means()),
        )

    validation = validation if validation is not None else dataset
    state = AdamState.for_params(params, lr=config.lr)
    targets = _Targets(config.density)
    best = params.copy()
    step = 0
    for epoch in range(config.max_epochs):
        if config.curriculum:
            batches = training_log.plan.batches
        else:
            batches = _shuffled_batches(ids, batch_size, config.seed, epoch)
        for batch_id, batch in enumerate(batches):
            started = time.perf_counter()
            images, maps = [], []
            for sample_id in batch:
                sample = by_id[sample_id]
                image, dotmap = sample.image, sample.dotmap
                flipped = False
                if config.augmentation is not None:
                    draw = epoch * len(dataset) + position_of[sample_id]
                    image, dotmap = augment(image, dotmap, config.augmentation, draw)
                    flipped = dotmap is not sample.dotmap
                images.append(image)
                maps.append(targets.get(sample_id, dotmap, flipped))
            images = np.stack(images)
            maps = np.stack(maps)[:, None]

            value, grads = _model_loss(params, images, maps)
            if not math.isfinite(value):
                log.error(
                    "non-finite loss at step %d (epoch %d); batch %s\n%s",
                    step,
                    epoch,
                    list(batch),
                    format_tensor(maps[:, 0]),
                )
                raise TrainingError(
                    f"non-finite loss at step {step} on batch {list(batch)}", batch_ids=batch
                )
            adam_step(params, grads, state)
            step += 1
            wall_ms = (time.perf_counter() - started) * 1000.0
            training_log.entries.append(
                LogEntry(step, epoch, batch_id, value, config.lr, wall_ms, tuple(batch))
            )
            log.debug("step %d epoch %d batch %d loss %.6g", step, epoch, batch_id, value)

        last_epoch = epoch == config.max_epochs - 1
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or last_epoch):
            report = evaluate(params, validation, config.density, config.grid, threads=threads)
            training_log.evaluations.append(
                {"epoch": epoch, "step": step, "mae": report.mae, "game": report.game}
            )
            log.info("epoch %d step %d: MAE %.4f GAME %.4f", epoch, step, report.mae, report.game)
            if report.mae < training_log.best_mae:
                training_log.best_mae = report.mae
                training_log.best_epoch = epoch
                best = params.copy()

    windows = training_log.nonmonotone_windows()
    if windows:
        log.warning(
            "smoothed loss increased in %d window(s) starting at steps %s", len(windows), windows
        )
    if not config.eval_every:
        return params, training_log
    return best, training_log


def curriculum_comparison(dataset, config, validation=None, threads=1):
    """Train with the curriculum on and off and report both final MAEs.

    Returns
    -------
    dict
        ``{"curriculum": mae, "shuffled": mae, "report": text}``
    """
    results = {}
    for label, enabled in (("curriculum", True), ("shuffled", False)):
        run_config = replace(config, curriculum=enabled)
        params, _ = train(dataset, run_config, validation, threads=threads)
        report = evaluate(
            params, validation or dataset, config.density, config.grid, threads=threads
        )
        results[label] = report.mae
    results["report"] = (
        f"final MAE with curriculum: {results['curriculum']:.4f}\n"
        f"final MAE with shuffled batches: {results['shuffled']:.4f}\n"
        f"difference (shuffled - curriculum): {results['shuffled'] - results['curriculum']:+.4f}\n"
    )
    log.info("curriculum comparison:\n%s", results["report"])
    return results
