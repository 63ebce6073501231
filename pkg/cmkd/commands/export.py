import argparse
import logging
from pathlib import Path

from cmkd.checkpoint import load_checkpoint
from cmkd.data import load_dataset
from cmkd.evaluation import export_embeddings

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "export-embeddings", help="write per-sample embeddings for plotting"
    )
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("-o", "--output", required=True)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(checkpoint.model, dataset, output)
    return 0
