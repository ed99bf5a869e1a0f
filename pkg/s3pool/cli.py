"""Command-line entry point.

Exit codes: 0 success, 1 failed verification, 2 usage or configuration error.
"""
import argparse
import csv
import logging
import sys
from typing import Optional, Sequence

from . import __version__
from .exceptions import S3PoolError
from .experiment import Experiment, demo_downsample
from .objects import JSONEncoder, TrainConfig
from .verify import LEVELS, run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _grid_list(text: str) -> list[int]:
    try:
        return [int(g) for g in text.split("-")]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"grid sizes look like 16-8, got '{text}'") from err


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON training config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="workers for independent runs")
    common.add_argument("--out", metavar="DIR", help="directory for result files")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="s3pool", description="S3Pool pooling operators, checks and desk-scale experiments."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    demo = commands.add_parser("demo-downsample", parents=[common], help="downsample a PGM/PPM image")
    demo.add_argument("input")
    demo.add_argument("output")
    demo.add_argument("-s", "--stride", type=int, default=2)
    grid = demo.add_mutually_exclusive_group()
    grid.add_argument("--grid", type=int, help="grid size g")
    grid.add_argument(
        "--grid-fraction", type=int, choices=(1, 2, 4),
        help="g = image width / N (4 quarter, 2 half, 1 whole width)",
    )
    demo.add_argument("--mode", choices=("uniform", "stochastic"), default="stochastic")

    verify = commands.add_parser("verify", parents=[common], help="run the property checks")
    verify.add_argument("--level", choices=LEVELS, default="fast")

    commands.add_parser("train", parents=[common], help="train a model from --config")

    evaluate = commands.add_parser("eval", parents=[common], help="test error of a checkpoint")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("--dataset", choices=("synthetic", "cifar10"))
    evaluate.add_argument("--data-dir")
    evaluate.add_argument("--ensemble", type=int, default=0, metavar="N", help="average N pooling draws")

    bench = commands.add_parser("bench", parents=[common], help="seconds per epoch by pooling variant")
    bench.add_argument("--variants", nargs="+", default=["max", "zeiler", "s3pool"])
    bench.add_argument("--batches", type=int, default=4)
    bench.add_argument("--arch", help="override the config architecture")

    sweep = commands.add_parser("sweep-grid", parents=[common], help="train one run per grid configuration")
    sweep.add_argument("--grids", nargs="+", type=_grid_list, default=[[2, 2], [8, 8], [16, 8]])
    sweep.add_argument("--seeds", nargs="+", type=int)

    sizes = commands.add_parser("sweep-size", parents=[common], help="train at several training-set sizes")
    sizes.add_argument("--sizes", nargs="+", type=int, required=True)
    sizes.add_argument("--poolings", nargs="+", default=["max", "s3pool"])
    sizes.add_argument("--seeds", nargs="+", type=int)
    return parser


def load_config(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = config.evolve(seed=args.seed)
    return config


def _print_rows(rows: Sequence[dict]) -> None:
    if not rows:
        return
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)


def cmd_demo_downsample(args) -> int:
    demo_downsample(
        args.input,
        args.output,
        s=args.stride,
        g=args.grid,
        seed=args.seed or 0,
        mode=args.mode,
        grid_fraction=args.grid_fraction,
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_checks(args.level, seed=seed, threads=args.threads)
    _print_rows(
        [{"check": r.name, "passed": int(r.passed), "seconds": f"{r.seconds:.3f}", "detail": r.detail} for r in results]
    )
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_train(args) -> int:
    experiment = Experiment(load_config(args), args.out, args.threads)
    metrics, _ = experiment.train()
    print(JSONEncoder(indent=2, sort_keys=True).encode(metrics.summary()))
    return EXIT_OK


def cmd_eval(args) -> int:
    overrides = {}
    if args.dataset:
        overrides["dataset"] = args.dataset
    if args.data_dir:
        overrides["data_dir"] = args.data_dir
    experiment, model = Experiment.from_checkpoint(args.checkpoint, overrides, threads=args.threads)
    _, test = experiment.load_data()
    error = experiment.evaluate(model, test, ensemble=args.ensemble)
    print(f"{error:.2f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_config(args)
    if args.arch:
        config = config.evolve(arch=args.arch)
    rows = Experiment(config, args.out, args.threads).bench(args.variants, args.batches)
    _print_rows([r.to_flat_dict() for r in rows])
    return EXIT_OK


def cmd_sweep_grid(args) -> int:
    config = load_config(args)
    seeds = args.seeds or [config.seed]
    rows = Experiment(config, args.out, args.threads).sweep_grid(args.grids, seeds)
    _print_rows([r.to_flat_dict() for r in rows])
    return EXIT_OK


def cmd_sweep_size(args) -> int:
    config = load_config(args)
    seeds = args.seeds or [config.seed]
    rows = Experiment(config, args.out, args.threads).sweep_train_size(args.sizes, args.poolings, seeds)
    _print_rows([r.to_flat_dict() for r in rows])
    return EXIT_OK


COMMANDS = {
    "demo-downsample": cmd_demo_downsample,
    "verify": cmd_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep-grid": cmd_sweep_grid,
    "sweep-size": cmd_sweep_size,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except S3PoolError as err:
        logger.error("%s", err)
        print(f"s3pool: error: {err}", file=sys.stderr)
        return EXIT_USAGE
