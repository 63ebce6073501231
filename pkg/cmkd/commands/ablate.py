import argparse
import logging

from pydantic import ValidationError

from cmkd.commands.common import (
    TRAINING_OVERRIDES,
    add_config_argument,
    add_training_arguments,
    load_experiment_config,
    load_or_generate,
)
from cmkd.evaluation import format_ablation, run_ablation, write_ablation_table
from cmkd.exceptions import ConfigError
from cmkd.schemas import AblationGrid

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "ablate", help="cross-validate every loss mask of the ablation grid"
    )
    add_config_argument(parser)
    add_training_arguments(parser)
    parser.add_argument(
        "--mask",
        action="append",
        help="comma-separated loss terms, e.g. sim,kd (repeatable); "
        "the task loss is always on",
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args, TRAINING_OVERRIDES)
    grid = config.eval.ablation
    if args.mask:
        masks = [[t.strip() for t in m.split(",") if t.strip()] for m in args.mask]
        try:
            grid = AblationGrid(masks=masks)
        except ValidationError as exc:
            raise ConfigError(f"invalid --mask:\n{exc}") from exc
    dataset = load_or_generate(args.data, config)
    table = run_ablation(dataset, config, grid, workers=args.workers)
    write_ablation_table(table, args.out)
    print(format_ablation(table))
    return 0
