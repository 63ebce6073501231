import argparse
import logging
from pathlib import Path

from cmkd.commands.common import (
    Override,
    add_config_argument,
    load_experiment_config,
)
from cmkd.data import generate, save_dataset

logger = logging.getLogger(__name__)

OVERRIDES: list[Override] = [
    ("task", ("data", "task")),
    ("trials", ("data", "n_trials")),
    ("samples_per_trial", ("data", "samples_per_trial")),
    ("latent_dim", ("data", "latent_dim")),
    ("student_dim", ("data", "student_dim")),
    ("teacher_dim", ("data", "teacher_dim")),
    ("classes", ("data", "num_classes")),
    ("noise", ("data", "label_noise")),
    ("student_noise", ("data", "student_noise_scale")),
    ("seed", ("data", "seed")),
]


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "generate", help="write a synthetic paired-modality dataset"
    )
    add_config_argument(parser)
    parser.add_argument("--task", choices=["dec", "cer"])
    parser.add_argument("--trials", type=int)
    parser.add_argument("--samples-per-trial", type=int)
    parser.add_argument("--latent-dim", type=int)
    parser.add_argument("--student-dim", type=int)
    parser.add_argument("--teacher-dim", type=int)
    parser.add_argument("--classes", type=int)
    parser.add_argument(
        "--noise", type=float, help="label noise ρ in [0, 1] (flip rate or σ)"
    )
    parser.add_argument("--student-noise", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("-o", "--output", required=True)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args, OVERRIDES)
    dataset = generate(config.data)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, output)
    logger.info("wrote %d samples to %s", len(dataset), output)
    return 0
