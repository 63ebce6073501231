import argparse
import logging
from pathlib import Path

from cmkd.checkpoint import save_checkpoint
from cmkd.commands.common import (
    TRAINING_OVERRIDES,
    add_config_argument,
    add_training_arguments,
    load_experiment_config,
    load_or_generate,
    write_json,
)
from cmkd.evaluation import format_report
from cmkd.training import run_cv

logger = logging.getLogger(__name__)

REPORT_FILE = "report.json"
TEACHER_FILE = "teacher.npz"


def student_file(fold: int) -> str:
    return f"student_fold{fold}.npz"


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser(
        "train", help="pretrain the teacher and cross-validate the student"
    )
    add_config_argument(parser)
    add_training_arguments(parser)
    parser.add_argument("--out", required=True, help="output directory")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args, TRAINING_OVERRIDES)
    dataset = load_or_generate(args.data, config)
    report, teacher, folds = run_cv(dataset, config, workers=args.workers)

    # nothing is written until every fold has finished
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out / TEACHER_FILE,
        teacher,
        metadata={"task": dataset.task.value, "seed": config.train.seed},
    )
    for result in folds:
        record = result.record
        save_checkpoint(
            out / student_file(record.fold),
            result.student,
            result.prototypes,
            metadata={
                "task": dataset.task.value,
                "seed": config.train.seed,
                "fold": record.fold,
                "val_trials": record.val_trials,
                "train_trials": record.train_trials,
            },
        )
    write_json(report, out / REPORT_FILE)
    logger.info("wrote report and %d checkpoints to %s", len(folds) + 1, out)
    print(format_report(report))
    return 0
