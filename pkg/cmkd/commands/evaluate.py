import argparse
import json
import logging
from pathlib import Path

from cmkd.checkpoint import load_checkpoint
from cmkd.commands.common import write_json
from cmkd.data import load_dataset
from cmkd.evaluation import evaluate_model

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="metrics of a checkpoint on a dataset")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument(
        "--split",
        choices=["all", "val"],
        default="all",
        help="`val` keeps only the fold's held-out trials",
    )
    parser.add_argument("-o", "--output", help="also write the metrics JSON here")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    result = evaluate_model(checkpoint, dataset, split=args.split)
    if args.output:
        write_json(result, Path(args.output))
    print(json.dumps(result, indent=2))
    return 0
