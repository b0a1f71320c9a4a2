"""Command-line interface: ``densecount <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical failure. Output files are written to a staging directory (or a
temporary file) and moved into place only when the command succeeds.
"""
import argparse
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .bench import benchmark_forward
from .config import density_config, metrics_config, read_config, scene_config, train_config
from .curriculum import write_plan
from .dataio import load_dataset, save_dataset, synth_dataset
from .errors import DensecountError, NumericalError, TrainingError
from .groundtruth import downscale_target, render_density
from .io import (
    export_density_image,
    load_checkpoint,
    read_density,
    save_checkpoint,
    write_density,
)
from .model import init_params
from .trainer import curriculum_comparison, evaluate, train

__all__ = ["main", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_NUMERIC"]

log = logging.getLogger("densecount")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@contextmanager
def staged_outputs(out_dir):
    """Yield a staging directory whose files move into ``out_dir`` on success."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    for item in sorted(staging.iterdir()):
        os.replace(item, out_dir / item.name)
    staging.rmdir()


def _config_values(path, overrides):
    values = read_config(path) if path else {}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    return values


def cmd_gengt(args):
    """Render full- and half-resolution density maps for every manifest entry."""
    samples = load_dataset(args.manifest)
    values = _config_values(args.density_config, {"density.sigma": args.sigma})
    config = density_config(values)

    def render(sample):
        full = render_density(sample.dotmap, config)
        return sample, full, downscale_target(full)

    total_count = total_mass = max_error = 0.0
    with staged_outputs(args.out_dir) as staging:
        if args.threads > 1:
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                rendered = list(pool.map(render, samples))
        else:
            rendered = [render(sample) for sample in samples]
        for sample, full, half in rendered:
            write_density(full, staging / f"{sample.sample_id}_full.dmap")
            write_density(half, staging / f"{sample.sample_id}_half.dmap")
            mass = float(full.sum())
            total_count += sample.count
            total_mass += mass
            max_error = max(max_error, abs(mass - sample.count), abs(half.sum() - sample.count))
    print(
        f"{len(samples)} images, {2 * len(samples)} maps, total count {total_count:.0f}, "
        f"total mass {total_mass:.9f}, max mass error {max_error:.3g}"
    )
    return EXIT_OK


def cmd_train(args):
    """Train from scratch; write the log, step timings, best checkpoint and plan.

    ``train_log.tsv`` holds no wall-clock values, so runs with equal seeds
    write identical bytes. With ``--compare-curriculum`` the final MAEs of a
    curriculum run and a shuffled run go to ``curriculum_comparison.txt``.
    """
    samples = load_dataset(args.manifest)
    overrides = {
        "seed": args.seed,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "max_epochs": args.epochs,
        "curriculum": args.curriculum,
    }
    config = train_config(_config_values(args.config, overrides))
    params, training_log = train(samples, config, threads=args.threads)
    comparison = None
    if args.compare_curriculum:
        comparison = curriculum_comparison(samples, config, threads=args.threads)
    with staged_outputs(args.out_dir) as staging:
        (staging / "train_log.tsv").write_text(
            training_log.to_delimited(timings=False), encoding="utf-8"
        )
        (staging / "train_timing.tsv").write_text(
            training_log.timings_to_delimited(), encoding="utf-8"
        )
        if comparison is not None:
            (staging / "curriculum_comparison.txt").write_text(
                comparison["report"], encoding="utf-8"
            )
        save_checkpoint(params, staging / "best.ckpt")
        if training_log.plan is not None:
            write_plan(training_log.plan, staging / "curriculum_plan.txt")
    print(
        f"{training_log.steps} steps, best MAE {training_log.best_mae:.4f} "
        f"at epoch {training_log.best_epoch}"
    )
    return EXIT_OK


def cmd_eval(args):
    """Evaluate a checkpoint on a manifest and write the metric report."""
    if args.checkpoint is None and not args.self_eval:
        raise UsageError("eval needs a checkpoint unless --self-eval is given")
    samples = load_dataset(args.manifest)
    settings = metrics_config(_config_values(args.metrics_config, {}))
    params = None if args.self_eval else load_checkpoint(args.checkpoint)
    report = evaluate(
        params,
        samples,
        density=settings["density"],
        grid=settings["grid"],
        ssim_config=settings["ssim"],
        psnr_max=settings["psnr_max"],
        threads=args.threads,
        self_eval=args.self_eval,
    )
    with staged_outputs(args.out_dir) as staging:
        (staging / "report.txt").write_text(report.to_table(), encoding="utf-8")
        (staging / "report.tsv").write_text(report.to_delimited(), encoding="utf-8")
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_bench(args):
    """Time forward passes and print complexity figures."""
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    else:
        params = init_params(args.seed)
    report = benchmark_forward(
        params,
        args.height,
        args.width,
        iterations=args.iterations,
        warmup=args.warmup,
        precision=args.precision,
        seed=args.seed,
    )
    print("\n".join(report.lines()))
    return EXIT_OK


def cmd_synth(args):
    """Write synthetic scenes, their annotations and a manifest."""
    overrides = {"seed": args.seed} if args.seed is not None else {}
    n_scenes, spec = scene_config(_config_values(args.spec_file, overrides))
    samples = synth_dataset(n_scenes, spec)
    with staged_outputs(args.out_dir) as staging:
        save_dataset(samples, staging)
    print(f"wrote {len(samples)} scenes to {args.out_dir}")
    return EXIT_OK


def cmd_export(args):
    """Write a grayscale visualization of a density grid."""
    density = read_density(args.map_file)
    export_density_image(density, args.image_out)
    return EXIT_OK


def build_parser():
    parser = _ArgumentParser(prog="densecount", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=None, help="random seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_ArgumentParser)

    p = sub.add_parser("gengt", help="render ground-truth density maps")
    p.add_argument("manifest")
    p.add_argument("density_config", nargs="?", help="key-value density config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sigma", type=float, help="fixed sigma override")
    p.set_defaults(func=cmd_gengt)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("manifest")
    p.add_argument("--config", help="key-value training config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--curriculum", choices=["on", "off"])
    p.add_argument(
        "--compare-curriculum",
        action="store_true",
        help="also train with the curriculum on and off and write both final MAEs",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("manifest")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--metrics-config", help="key-value metrics config file")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--self-eval", action="store_true", help="use the ground truth as prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time inference")
    p.add_argument("--checkpoint")
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("spec_file")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export", help="export a density map as an image")
    p.add_argument("map_file")
    p.add_argument("image_out")
    p.set_defaults(func=cmd_export)
    return parser


def _setup_logging(verbose):
    for handler in [h for h in log.handlers if getattr(h, "_densecount", False)]:
        log.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._densecount = True
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None):
    """Run the command line and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("densecount: a command is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose)
    if args.seed is None and args.command in ("bench",):
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, NumericalError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (DensecountError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
