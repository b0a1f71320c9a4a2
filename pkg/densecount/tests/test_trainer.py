import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from densecount.curriculum import build_plan, CountProxy, score_samples
from densecount.dataio import Sample, SceneSpec, synth_dataset
from densecount.errors import ConfigurationError, DimensionError, TrainingError
from densecount.groundtruth import DotMap
from densecount.io import save_checkpoint
from densecount.model import init_params
from densecount.trainer import (
    curriculum_comparison,
    evaluate,
    LogEntry,
    loss,
    train,
    TrainConfig,
    TrainingLog,
)

from .common import numeric_grad, small_scenes

quick = TrainConfig(lr=1e-3, batch_size=3, max_epochs=3, augmentation=None)


def test_loss_zero():
    target = np.random.default_rng(0).random((2, 1, 4, 4))
    value, grad = loss(target.copy(), target)
    assert value == 0.0
    assert not grad.any()


@pytest.mark.parametrize("c", [0.5, -2.0, 3.0])
def test_loss_constant_offset(c):
    target = np.random.default_rng(0).random((1, 1, 5, 6))
    value, _ = loss(target + c, target)
    assert value == pytest.approx(c * c * 30, rel=1e-12)
    batch = np.concatenate([target, target])
    value, _ = loss(batch + c, batch)
    assert value == pytest.approx(c * c * 30, rel=1e-12)


def test_loss_gradient():
    rng = np.random.default_rng(1)
    pred, target = rng.random((3, 1, 4, 5)), rng.random((3, 1, 4, 5))
    _, grad = loss(pred, target)
    expected = numeric_grad(lambda: loss(pred, target)[0], pred)
    assert_allclose(grad, expected, rtol=1e-6, atol=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        loss(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lr": 0.0},
        {"batch_size": 0},
        {"max_epochs": -1},
        {"eval_every": -1},
        {"oracle": "file"},
        {"oracle": "teacher"},
    ],
)
def test_train_config_invalid(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


def test_train_config_oracle_name():
    assert TrainConfig(oracle="COUNT").oracle == "count"
    assert TrainConfig(oracle="file", curriculum=False).oracle == "file"
    with pytest.raises(ValueError):
        TrainConfig(oracle="random")


def test_zero_epochs_returns_init():
    params, training_log = train(small_scenes(2), TrainConfig(max_epochs=0, seed=5))
    for a, b in zip(params.arrays(), init_params(5).arrays()):
        assert_array_equal(a, b)
    assert training_log.steps == 0


def test_empty_dataset():
    with pytest.raises(ConfigurationError):
        train([], quick)


def test_duplicate_ids():
    samples = small_scenes(2)
    samples[1].sample_id = samples[0].sample_id
    with pytest.raises(ConfigurationError, match="unique"):
        train(samples, quick)


def test_step_count():
    params, training_log = train(small_scenes(4), quick)
    assert training_log.steps == 3 * 2
    assert [e.step for e in training_log.entries] == list(range(1, 7))
    assert [len(e.sample_ids) for e in training_log.entries] == [3, 1] * 3
    assert all(np.isfinite(e.loss) for e in training_log.entries)
    assert [ev["epoch"] for ev in training_log.evaluations] == [0, 1, 2]
    assert training_log.best_epoch in (0, 1, 2)
    assert training_log.best_mae == min(ev["mae"] for ev in training_log.evaluations)


@pytest.mark.parametrize("curriculum", [True, False])
def test_same_seed_is_bit_identical(curriculum, tmp_path):
    samples = small_scenes(4)
    config = TrainConfig(lr=1e-3, batch_size=2, max_epochs=2, curriculum=curriculum, seed=7)
    first, log1 = train(samples, config)
    second, log2 = train(samples, config)
    for a, b in zip(first.arrays(), second.arrays()):
        assert_array_equal(a, b)
    assert [e.loss for e in log1.entries] == [e.loss for e in log2.entries]
    assert [e.sample_ids for e in log1.entries] == [e.sample_ids for e in log2.entries]
    save_checkpoint(first, tmp_path / "a.ckpt")
    save_checkpoint(second, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_curriculum_order_follows_plan():
    samples = small_scenes(6)
    config = TrainConfig(lr=1e-3, batch_size=2, max_epochs=2, seed=1)
    _, training_log = train(samples, config)
    expected = build_plan(score_samples(CountProxy(), samples), 2, 1)
    assert training_log.plan == expected
    for epoch in range(2):
        assert tuple(training_log.epoch_batches(epoch)) == expected.batches
    means = expected.batch_means()
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_shuffled_order_changes_between_epochs():
    samples = small_scenes(8)
    config = TrainConfig(lr=1e-3, batch_size=2, max_epochs=3, curriculum=False, eval_every=0)
    _, training_log = train(samples, config)
    assert training_log.plan is None
    orders = [training_log.epoch_batches(e) for e in range(3)]
    assert len({tuple(o) for o in orders}) > 1
    for order in orders:
        assert sorted(i for batch in order for i in batch) == sorted(s.sample_id for s in samples)


def test_custom_teacher():
    samples = small_scenes(4)
    reverse = {s.sample_id: float(-i + 10) for i, s in enumerate(samples)}

    def oracle(sample):
        return reverse[sample.sample_id]

    _, training_log = train(samples, TrainConfig(batch_size=1, max_epochs=1), teacher=oracle)
    assert training_log.plan.sample_ids == [s.sample_id for s in reversed(samples)]


def test_mixed_sizes_force_batch_size_one(caplog):
    small = small_scenes(2, size=16)
    wide = synth_dataset(1, SceneSpec(24, 16, 2, (1.0, 2.0), min_separation=2.0), prefix="wide")
    with caplog.at_level(logging.WARNING, logger="densecount"):
        _, training_log = train(small + wide, TrainConfig(batch_size=2, max_epochs=1))
    assert "differ in size" in caplog.text
    assert all(len(e.sample_ids) == 1 for e in training_log.entries)
    assert training_log.steps == 3


def test_non_finite_input_stops_training(caplog):
    image = np.full((3, 16, 16), np.nan)
    sample = Sample("broken", image, DotMap(16, 16, [[4.0, 4.0]]))
    with pytest.raises(TrainingError, match="non-finite loss") as excinfo:
        train([sample], TrainConfig(batch_size=1, max_epochs=1, augmentation=None))
    assert excinfo.value.batch_ids == ["broken"]
    assert "broken" in caplog.text


def test_eval_every_zero_returns_final():
    samples = small_scenes(2)
    params, training_log = train(samples, TrainConfig(lr=1e-3, max_epochs=2, eval_every=0))
    assert training_log.evaluations == []
    assert training_log.best_epoch is None
    assert not np.array_equal(params["head"].weight, init_params(0)["head"].weight)


def test_evaluate_self_eval():
    samples = small_scenes(3)
    report = evaluate(init_params(0), samples, self_eval=True)
    assert report.mae == 0.0
    assert report.mean_ssim == 1.0
    assert [m.sample_id for m in report.per_image] == [s.sample_id for s in samples]
    assert report.per_image[0].gt_count == pytest.approx(samples[0].count, abs=1e-6)


def test_evaluate_zero_model():
    samples = small_scenes(3)
    report = evaluate(init_params(0).zeros_like(), samples)
    assert report.mae == pytest.approx(np.mean([s.count for s in samples]), abs=1e-6)


def make_log(losses):
    return TrainingLog([LogEntry(i + 1, 0, i, float(v), 1e-4, 1.0) for i, v in enumerate(losses)])


def test_nonmonotone_windows():
    assert make_log(np.arange(500.0)).nonmonotone_windows() == [0, 200]
    assert make_log(np.arange(500.0)[::-1]).nonmonotone_windows() == []
    assert make_log(np.arange(100.0)).nonmonotone_windows() == []


def test_log_to_delimited():
    training_log = make_log([1.0, 0.5])
    training_log.evaluations.append({"epoch": 0, "step": 2, "mae": 1.5, "game": 2.0})
    lines = training_log.to_delimited().splitlines()
    assert lines[0] == "step\tepoch\tbatch_id\tloss\tlr\twall_ms"
    assert lines[1] == "1\t0\t0\t1.0\t0.0001\t1.000"
    assert lines[-1] == "0\t2\t1.5\t2.0"


def test_log_without_timings():
    training_log = make_log([1.0, 0.5])
    lines = training_log.to_delimited(timings=False).splitlines()
    assert lines[0] == "step\tepoch\tbatch_id\tloss\tlr"
    assert lines[2] == "2\t0\t1\t0.5\t0.0001"
    assert training_log.timings_to_delimited().splitlines() == [
        "step\twall_ms",
        "1\t1.000",
        "2\t1.000",
    ]


def test_curriculum_comparison():
    samples = small_scenes(4)
    results = curriculum_comparison(samples, TrainConfig(lr=1e-3, batch_size=2, max_epochs=1))
    assert set(results) == {"curriculum", "shuffled", "report"}
    assert "with curriculum" in results["report"]
    assert results["curriculum"] >= 0 and results["shuffled"] >= 0


@pytest.mark.slow
def test_overfits_small_dataset():
    samples = synth_dataset(8, SceneSpec(64, 64, 10, seed=0))
    config = TrainConfig(max_epochs=1000, eval_every=50)
    params, training_log = train(samples, config)
    assert training_log.steps == 2000
    assert training_log.best_mae < 1.0
    assert evaluate(params, samples).mae == pytest.approx(training_log.best_mae)
