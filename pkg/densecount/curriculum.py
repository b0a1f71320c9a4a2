"""Difficulty scoring and easy-to-hard mini-batch plans.

A difficulty oracle maps a ``Sample`` to a nonnegative score. Samples are
sorted once, ascending by score, and chunked into batches that training replays
in the same order every epoch.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._enum import ParamEnum
from .errors import ConfigurationError, LoadError, ScoringError
from .groundtruth import DensityConfig, render_density
from .io import atomic_write
from .model import count_from_density, forward

__all__ = [
    "DifficultyScore",
    "CurriculumPlan",
    "OracleName",
    "CountProxy",
    "TeacherError",
    "FileOracle",
    "score_samples",
    "build_plan",
    "write_plan",
    "read_plan",
]

log = logging.getLogger(__name__)


class OracleName(ParamEnum):
    count = "count"
    teacher = "teacher"
    file = "file"


@dataclass(frozen=True)
class DifficultyScore:
    sample_id: str
    score: float
    oracle_name: str


class CountProxy:
    """Ground-truth object count as difficulty: denser scenes are harder."""

    name = "count"

    def __call__(self, sample):
        return float(sample.dotmap.count)


class TeacherError:
    """Absolute counting error of a teacher model.

    Parameters
    ----------
    predict : callable
        ``predict(sample) -> density map``; the predicted count is its sum.
    """

    name = "teacher"

    def __init__(self, predict):
        self.predict = predict

    @classmethod
    def from_params(cls, params):
        """Use a trained (or any checkpointed) network as the teacher."""

        def predict(sample):
            return forward(params, sample.image[None])[0, 0]

        return cls(predict)

    @classmethod
    def from_renderer(cls, config=None):
        """A teacher that reproduces the ground truth exactly."""
        config = config or DensityConfig()
        return cls(lambda sample: render_density(sample.dotmap, config))

    def __call__(self, sample):
        predicted = count_from_density(self.predict(sample))
        return abs(predicted - sample.dotmap.count)


class FileOracle:
    """Scores read from a text file of ``sample_id score`` lines."""

    name = "file"

    def __init__(self, path):
        self.path = Path(path)
        self.scores = {}
        try:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        except FileNotFoundError:
            raise LoadError("score file not found", path=self.path) from None
        for lineno, line in enumerate(lines, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            try:
                sample_id, score = parts[0], float(parts[1])
            except (IndexError, ValueError):
                raise LoadError(
                    f"expected 'sample_id score', got '{text}'", path=self.path, line=lineno
                ) from None
            self.scores[sample_id] = score

    def __call__(self, sample):
        try:
            return self.scores[sample.sample_id]
        except KeyError:
            raise KeyError(f"no score for '{sample.sample_id}' in {self.path}") from None


def score_samples(oracle, samples, threads=1):
    """Score every sample with a difficulty oracle.

    Parameters
    ----------
    oracle : callable
        ``oracle(sample) -> float``; its ``name`` attribute labels the scores.
    samples : sequence of Sample
    threads : int, default 1

    Returns
    -------
    list of DifficultyScore, in sample order

    Raises
    ------
    ScoringError
        Naming the sample on which the oracle failed or returned a negative or
        non-finite score.
    """
    name = getattr(oracle, "name", type(oracle).__name__)

    def score(sample):
        try:
            value = float(oracle(sample))
        except Exception as exc:
            raise ScoringError(
                f"oracle '{name}' failed on sample '{sample.sample_id}': {exc}",
                sample.sample_id,
            ) from exc
        if not (math.isfinite(value) and value >= 0):
            raise ScoringError(
                f"oracle '{name}' gave invalid score {value} for '{sample.sample_id}'",
                sample.sample_id,
            )
        return DifficultyScore(sample.sample_id, value, name)

    if threads <= 1:
        return [score(sample) for sample in samples]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(score, samples))


@dataclass(frozen=True)
class CurriculumPlan:
    """Ordered batches of sample ids, replayed as-is every epoch."""

    batches: tuple
    batch_size: int
    scores: tuple = ()
    policy: str = "static_ascending"

    @property
    def sample_ids(self):
        return [sample_id for batch in self.batches for sample_id in batch]

    def batch_means(self):
        lookup = {s.sample_id: s.score for s in self.scores}
        return [float(np.mean([lookup[i] for i in batch])) for batch in self.batches]


def build_plan(scores, batch_size, seed=0):
    """Sort scored samples ascending and chunk them into batches.

    Ties are ordered by sample id and then shuffled (seeded) within each group
    of exactly equal scores. The last batch may be short.

    Examples
    --------
    >>> scores = [DifficultyScore(i, s, "x") for i, s in [("a", 3), ("b", 1), ("c", 2)]]
    >>> build_plan(scores, 1).batches
    (('b',), ('c',), ('a',))
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be at least 1, got {batch_size}")
    scores = list(scores)
    if not scores:
        raise ConfigurationError("cannot build a curriculum plan from zero samples")
    ids = [s.sample_id for s in scores]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("sample ids must be unique")

    rng = np.random.default_rng(seed)
    ordered = sorted(scores, key=lambda s: (s.score, s.sample_id))
    result = []
    start = 0
    while start < len(ordered):
        end = start
        while end < len(ordered) and ordered[end].score == ordered[start].score:
            end += 1
        group = ordered[start:end]
        if len(group) > 1:
            group = [group[i] for i in rng.permutation(len(group))]
        result.extend(group)
        start = end

    batches = tuple(
        tuple(s.sample_id for s in result[i : i + batch_size])
        for i in range(0, len(result), batch_size)
    )
    return CurriculumPlan(batches, batch_size, tuple(result))


def write_plan(plan, path):
    """Write one sample id per line with a blank line between batches."""
    with atomic_write(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n\n".join("\n".join(batch) for batch in plan.batches))
        f.write("\n")


def read_plan(path):
    """Read the batches of a plan file back as a tuple of tuples."""
    text = Path(path).read_text(encoding="utf-8")
    blocks = [block.split() for block in text.strip().split("\n\n")]
    return tuple(tuple(block) for block in blocks if block)
