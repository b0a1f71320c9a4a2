import logging

import numpy as np
import pytest
from PIL import Image

import densecount.cli
from densecount import __version__
from densecount.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from densecount.dataio import save_dataset
from densecount.errors import TrainingError
from densecount.io import load_checkpoint, read_density, save_checkpoint, write_density
from densecount.model import init_params

from .common import small_scenes


@pytest.fixture(autouse=True)
def reset_cli_logging():
    yield
    logger = logging.getLogger("densecount")
    for handler in [h for h in logger.handlers if getattr(h, "_densecount", False)]:
        logger.removeHandler(handler)
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def manifest(tmp_path):
    return save_dataset(small_scenes(4), tmp_path / "data")


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "scenes.cfg"
    path.write_text(
        "n_scenes = 5\nwidth = 24\nheight = 16\nn_objects = 3\n"
        "radius_range = 1 2\nmin_separation = 2\nseed = 4\n"
    )
    return path


def listing(path):
    return sorted(p.name for p in path.iterdir())


def test_gengt_empty_manifest(tmp_path, capsys):
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("image_path,annotation_path,altitude\n")
    assert main(["gengt", str(manifest), "--out-dir", str(tmp_path / "maps")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("0 images, 0 maps")
    assert listing(tmp_path / "maps") == []


def test_gengt_writes_two_maps_per_image(tmp_path, capsys):
    samples = small_scenes(10)
    manifest = save_dataset(samples, tmp_path / "data")
    out_dir = tmp_path / "maps"
    assert main(["--threads", "2", "gengt", str(manifest), "--out-dir", str(out_dir)]) == EXIT_OK
    names = listing(out_dir)
    assert len(names) == 20
    assert "scene_000_full.dmap" in names and "scene_009_half.dmap" in names
    for sample in samples:
        full = read_density(out_dir / f"{sample.sample_id}_full.dmap")
        half = read_density(out_dir / f"{sample.sample_id}_half.dmap")
        assert full.shape == (16, 16) and half.shape == (8, 8)
        assert full.sum() == pytest.approx(sample.count, abs=1e-9)
        assert half.sum() == pytest.approx(sample.count, abs=1e-9)
    out = capsys.readouterr().out
    assert f"10 images, 20 maps, total count {sum(s.count for s in samples)}" in out


def test_gengt_sigma_override(tmp_path, manifest):
    config = tmp_path / "density.cfg"
    config.write_text("density.sigma = 8\n")
    args = ["gengt", str(manifest), str(config), "--out-dir", str(tmp_path / "a")]
    assert main(args) == EXIT_OK
    args = ["gengt", str(manifest), str(config), "--sigma", "1", "--out-dir", str(tmp_path / "b")]
    assert main(args) == EXIT_OK
    wide = read_density(tmp_path / "a" / "scene_000_full.dmap")
    narrow = read_density(tmp_path / "b" / "scene_000_full.dmap")
    assert narrow.max() > wide.max()


def test_gengt_altitude_without_altitudes(tmp_path, manifest, caplog):
    config = tmp_path / "density.cfg"
    config.write_text("density.mode = altitude\ndensity.bands = 0:50:4, 50:100:2\n")
    out_dir = tmp_path / "maps"
    assert main(["gengt", str(manifest), str(config), "--out-dir", str(out_dir)]) == EXIT_DATA
    assert "scene_000" in caplog.text
    assert "no altitude" in caplog.text
    # nothing is left behind
    assert listing(out_dir) == []


def test_train_outputs(tmp_path, manifest, capsys):
    out_dir = tmp_path / "run"
    args = ["--seed", "1", "train", str(manifest), "--out-dir", str(out_dir)]
    args += ["--epochs", "1", "--batch-size", "2", "--lr", "0.001"]
    assert main(args) == EXIT_OK
    assert listing(out_dir) == [
        "best.ckpt",
        "curriculum_plan.txt",
        "train_log.tsv",
        "train_timing.tsv",
    ]
    load_checkpoint(out_dir / "best.ckpt")
    log_lines = (out_dir / "train_log.tsv").read_text().splitlines()
    assert log_lines[0].startswith("step\tepoch")
    assert len([line for line in log_lines[1:] if line and line[0].isdigit()]) >= 2
    plan_ids = [line for line in (out_dir / "curriculum_plan.txt").read_text().splitlines() if line]
    assert sorted(plan_ids) == [f"scene_{i:03d}" for i in range(4)]
    assert capsys.readouterr().out.startswith("2 steps, best MAE")


def test_train_config_file(tmp_path, manifest):
    config = tmp_path / "train.cfg"
    config.write_text("max_epochs = 1\nbatch_size = 4\ncurriculum = on\naugmentation = off\n")
    out_dir = tmp_path / "run"
    args = ["train", str(manifest), "--config", str(config), "--curriculum", "off"]
    assert main(args + ["--out-dir", str(out_dir)]) == EXIT_OK
    assert listing(out_dir) == ["best.ckpt", "train_log.tsv", "train_timing.tsv"]


def test_train_same_seed_same_bytes(tmp_path, manifest):
    args = ["--seed", "3", "train", str(manifest), "--epochs", "2", "--batch-size", "2"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == EXIT_OK
    for name in ("best.ckpt", "curriculum_plan.txt", "train_log.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "wall_ms" not in (tmp_path / "a" / "train_log.tsv").read_text()
    timing = (tmp_path / "a" / "train_timing.tsv").read_text().splitlines()
    assert timing[0] == "step\twall_ms"
    assert len(timing) == 1 + 2 * 2


def test_train_compare_curriculum(tmp_path, manifest):
    out_dir = tmp_path / "run"
    args = ["train", str(manifest), "--epochs", "1", "--batch-size", "2", "--compare-curriculum"]
    assert main(args + ["--out-dir", str(out_dir)]) == EXIT_OK
    report = (out_dir / "curriculum_comparison.txt").read_text()
    assert "final MAE with curriculum" in report
    assert "final MAE with shuffled batches" in report


@pytest.mark.slow
def test_curriculum_comparison_report_on_64_scenes(tmp_path):
    spec = tmp_path / "scenes.cfg"
    spec.write_text(
        "n_scenes = 64\nwidth = 32\nheight = 32\nn_objects = 6\n"
        "radius_range = 1 2\nmin_separation = 3\nseed = 11\n"
    )
    assert main(["synth", str(spec), str(tmp_path / "scenes")]) == EXIT_OK
    manifest = tmp_path / "scenes" / "manifest.csv"
    out_dir = tmp_path / "run"
    args = ["train", str(manifest), "--epochs", "20", "--compare-curriculum"]
    assert main(args + ["--out-dir", str(out_dir)]) == EXIT_OK
    lines = (out_dir / "curriculum_comparison.txt").read_text().splitlines()
    assert len(lines) == 3
    assert lines[2].startswith("difference (shuffled - curriculum)")


def test_train_non_finite_exit_code(tmp_path, manifest, monkeypatch, caplog):
    def broken(*args, **kwargs):
        raise TrainingError("non-finite loss at step 0", batch_ids=["scene_000"])

    monkeypatch.setattr(densecount.cli, "train", broken)
    out_dir = tmp_path / "run"
    assert main(["train", str(manifest), "--out-dir", str(out_dir)]) == EXIT_NUMERIC
    assert "non-finite loss" in caplog.text
    assert not out_dir.exists()


def test_train_missing_manifest(tmp_path, caplog):
    args = ["train", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path / "run")]
    assert main(args) == EXIT_DATA
    assert "manifest not found" in caplog.text


def test_eval_self_eval(tmp_path, manifest, capsys):
    out_dir = tmp_path / "report"
    assert main(["eval", str(manifest), "--self-eval", "--out-dir", str(out_dir)]) == EXIT_OK
    assert listing(out_dir) == ["report.tsv", "report.txt"]
    mean_row = (out_dir / "report.tsv").read_text().splitlines()[-1].split("\t")
    assert mean_row[0] == "MEAN"
    assert float(mean_row[3]) == 0.0
    assert float(mean_row[5]) == 1.0
    assert "scene_003" in capsys.readouterr().out


def test_eval_checkpoint(tmp_path, manifest):
    checkpoint = tmp_path / "model.ckpt"
    save_checkpoint(init_params(0).zeros_like(), checkpoint)
    metrics = tmp_path / "metrics.cfg"
    metrics.write_text("grid_rows = 2\ngrid_cols = 2\nssim_mode = windowed\nssim_window = 5\n")
    out_dir = tmp_path / "report"
    args = ["eval", str(manifest), str(checkpoint), "--metrics-config", str(metrics)]
    assert main(args + ["--out-dir", str(out_dir)]) == EXIT_OK
    report = (out_dir / "report.txt").read_text()
    assert report.startswith("# grid=2x2, ssim=windowed(5)")


def test_eval_corrupt_checkpoint(tmp_path, manifest, caplog):
    checkpoint = tmp_path / "model.ckpt"
    save_checkpoint(init_params(0), checkpoint)
    data = bytearray(checkpoint.read_bytes())
    data[300] ^= 0xFF
    checkpoint.write_bytes(bytes(data))
    out_dir = tmp_path / "report"
    assert main(["eval", str(manifest), str(checkpoint), "--out-dir", str(out_dir)]) == EXIT_DATA
    assert "checksum" in caplog.text
    assert not (out_dir / "report.txt").exists()


def test_eval_needs_checkpoint(manifest, capsys):
    assert main(["eval", str(manifest)]) == EXIT_USAGE
    assert "checkpoint" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["gengt", "manifest.csv"],
        ["train", "manifest.csv", "--out-dir", "x", "--curriculum", "maybe"],
        ["bench", "--iterations", "many"],
        ["--threads"],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "usage: densecount" in capsys.readouterr().err


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_bench(capsys):
    args = ["bench", "--height", "16", "--width", "16", "--iterations", "1", "--warmup", "0"]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out
    assert "timed iterations   1" in out
    assert "warmup             0" in out
    assert "60545" in out


def test_bench_invalid_iterations(caplog):
    assert main(["bench", "--height", "16", "--width", "16", "--iterations", "0"]) == EXIT_DATA
    assert "iterations" in caplog.text


def test_synth(tmp_path, spec_file, capsys):
    out_dir = tmp_path / "scenes"
    assert main(["synth", str(spec_file), str(out_dir)]) == EXIT_OK
    names = listing(out_dir)
    assert "manifest.csv" in names
    assert len([n for n in names if n.endswith(".ppm")]) == 5
    assert "wrote 5 scenes" in capsys.readouterr().out
    with Image.open(out_dir / "scene_000.ppm") as img:
        assert img.size == (24, 16)


def test_synth_is_deterministic(tmp_path, spec_file):
    assert main(["synth", str(spec_file), str(tmp_path / "a")]) == EXIT_OK
    assert main(["synth", str(spec_file), str(tmp_path / "b")]) == EXIT_OK
    assert listing(tmp_path / "a") == listing(tmp_path / "b")
    for name in listing(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_seed_flag(tmp_path, spec_file):
    assert main(["synth", str(spec_file), str(tmp_path / "a")]) == EXIT_OK
    assert main(["--seed", "5", "synth", str(spec_file), str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "scene_000.txt").read_text()
    b = (tmp_path / "b" / "scene_000.txt").read_text()
    assert a != b


def test_synth_then_gengt(tmp_path, spec_file):
    assert main(["synth", str(spec_file), str(tmp_path / "scenes")]) == EXIT_OK
    manifest = tmp_path / "scenes" / "manifest.csv"
    assert main(["gengt", str(manifest), "--out-dir", str(tmp_path / "maps")]) == EXIT_OK
    assert len(listing(tmp_path / "maps")) == 10


def test_export_zero_map(tmp_path):
    write_density(np.zeros((6, 8)), tmp_path / "zero.dmap")
    image = tmp_path / "zero.png"
    assert main(["export", str(tmp_path / "zero.dmap"), str(image)]) == EXIT_OK
    with Image.open(image) as img:
        assert img.size == (8, 6)
        assert not np.asarray(img).any()


def test_export_unwritable(tmp_path):
    write_density(np.ones((2, 2)), tmp_path / "ones.dmap")
    target = tmp_path / "missing" / "out.png"
    assert main(["export", str(tmp_path / "ones.dmap"), str(target)]) == EXIT_DATA
    assert not target.exists()


def test_export_malformed_map(tmp_path, caplog):
    (tmp_path / "bad.dmap").write_text("DMAP 2 2\n1 2\n")
    assert main(["export", str(tmp_path / "bad.dmap"), str(tmp_path / "x.png")]) == EXIT_DATA
    assert "expected 2 rows" in caplog.text
