"""Ablation runner, report rendering, checkpoint evaluation and embedding export."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from cmkd.checkpoint import Checkpoint
from cmkd.config import get_settings
from cmkd.data import PairedDataset, format_float, split_group_by_trial
from cmkd.exceptions import DataError, DataFormatError
from cmkd.models import ModelParams, extract
from cmkd.schemas import (
    LOSS_TERMS,
    AblationGrid,
    AblationRow,
    AblationTable,
    ExperimentConfig,
    LossWeights,
    MetricSummary,
    RunReport,
)
from cmkd.tensor import Tensor, no_grad
from cmkd.training import build_report, cross_validate, evaluate_split, pretrain_teacher

logger = logging.getLogger(__name__)

ABLATION_CSV = "ablation.csv"
ABLATION_JSON = "ablation.json"


# Ablation


def config_for_mask(config: ExperimentConfig, mask: list[str]) -> ExperimentConfig:
    """Zero λ for every term outside `mask`; masked-in terms keep their weight."""
    base = config.loss.weights
    weights = {}
    for name in LOSS_TERMS:
        weight = getattr(base, name)
        if name not in mask:
            weights[name] = 0.0
        else:
            weights[name] = weight if weight > 0 else 1.0
    loss = config.loss.model_copy(update={"weights": LossWeights(**weights)})
    return config.model_copy(update={"loss": loss})


def run_ablation(
    dataset: PairedDataset,
    config: ExperimentConfig,
    grid: Optional[AblationGrid] = None,
    workers: Optional[int] = None,
) -> AblationTable:
    """One cross-validated run per mask, sharing a single teacher and fold plan."""
    grid = grid or config.eval.ablation
    plan = split_group_by_trial(dataset, config.train.folds, config.train.seed)
    teacher, summary = pretrain_teacher(dataset, config)
    rows = []
    for mask in grid.masks:
        masked = config_for_mask(config, mask)
        logger.info("ablation mask %s", "+".join(mask))
        results = cross_validate(dataset, masked, teacher, plan, workers)
        report = build_report(masked, dataset, summary, results)
        rows.append(AblationRow(mask=report.ablation_mask, report=report))
    return AblationTable(task=dataset.task, rows=rows)


def write_ablation_table(
    table: AblationTable, out_dir: Union[str, Path]
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_names = list(table.rows[0].report.aggregate) if table.rows else []
    clean_names = list(table.rows[0].report.clean_aggregate) if table.rows else []
    columns = list(LOSS_TERMS)
    for name in metric_names:
        columns += [f"{name}_mean", f"{name}_std"]
    for name in clean_names:
        columns += [f"clean_{name}_mean", f"clean_{name}_std"]

    csv_path = out_dir / ABLATION_CSV
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in table.rows:
            cells = [int(row.mask[name]) for name in LOSS_TERMS]
            summaries = [row.report.aggregate[n] for n in metric_names]
            summaries += [row.report.clean_aggregate[n] for n in clean_names]
            for s in summaries:
                cells += [format_float(s.mean), format_float(s.std)]
            writer.writerow(cells)

    json_path = out_dir / ABLATION_JSON
    with open(json_path, "w", encoding="utf-8") as fh:
        reports = [row.report.model_dump(mode="json") for row in table.rows]
        json.dump(reports, fh, indent=2)
    logger.info("wrote %s and %s", csv_path, json_path)
    return csv_path, json_path


# Rendering


def format_summary(summary: MetricSummary, decimals: Optional[int] = None) -> str:
    digits = get_settings().REPORT_DECIMALS if decimals is None else decimals
    return f"{summary.mean:.{digits}f}±{summary.std:.{digits}f}"


def format_report(report: RunReport) -> str:
    lines = [f"task={report.task.value} seed={report.seed} folds={len(report.folds)}"]
    for name, summary in report.aggregate.items():
        lines.append(f"  {name:<10} {format_summary(summary)}")
    for name, summary in report.clean_aggregate.items():
        lines.append(f"  clean {name:<4} {format_summary(summary)}")
    return "\n".join(lines)


def format_ablation(table: AblationTable) -> str:
    names = list(table.rows[0].report.aggregate) if table.rows else []
    lines = ["  ".join(["mask".ljust(16), *(n.ljust(13) for n in names)])]
    for row in table.rows:
        label = "+".join(n for n in LOSS_TERMS if row.mask[n])
        cells = [format_summary(row.report.aggregate[n]).ljust(13) for n in names]
        lines.append("  ".join([label.ljust(16), *cells]))
    return "\n".join(lines)


# Checkpoint evaluation


def evaluate_model(
    checkpoint: Checkpoint, dataset: PairedDataset, split: str = "all"
) -> dict[str, Any]:
    """
    Task loss and metrics of a checkpoint on `dataset`. With split="val" only
    the held-out trials recorded in the checkpoint metadata are used.
    """
    model = checkpoint.model
    if model.head_config.output_dim != dataset.output_dim:
        raise DataError(
            f"checkpoint head emits {model.head_config.output_dim} values, "
            f"the {dataset.task.value} dataset needs {dataset.output_dim}"
        )
    if split == "val":
        trials = checkpoint.metadata.get("val_trials")
        if not trials:
            raise DataError("checkpoint carries no held-out trial ids")
        dataset = dataset.subset(np.flatnonzero(np.isin(dataset.trial_ids, trials)))
        if len(dataset) == 0:
            raise DataError("none of the held-out trials occur in the dataset")
    task_loss, metrics = evaluate_split(model, dataset)
    return {
        "role": model.role,
        "split": split,
        "n": len(dataset),
        "task_loss": task_loss,
        "metrics": metrics,
    }


# Embedding export


def embed(model: ModelParams, dataset: PairedDataset) -> np.ndarray:
    x = dataset.x_t if model.role == "teacher" else dataset.x_s
    with no_grad():
        _, e = extract(model, Tensor(x))
    return e.numpy()


def export_embeddings(
    model: ModelParams, dataset: PairedDataset, path: Union[str, Path]
) -> int:
    e = embed(model, dataset)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_id", "y"] + [f"e_{i}" for i in range(e.shape[1])])
        for i in range(len(dataset)):
            y = dataset.y[i]
            label = str(int(y)) if dataset.num_classes else format_float(y)
            writer.writerow(
                [str(int(dataset.trial_ids[i])), label]
                + [format_float(v) for v in e[i]]
            )
    logger.info(
        "exported %d embeddings of width %d to %s", len(dataset), e.shape[1], path
    )
    return len(dataset)


def read_embeddings(
    path: Union[str, Path],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(trial_ids, y, embeddings) from an export file."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["trial_id", "y"]:
            raise DataFormatError("expected a trial_id,y,e_0.. header", 1)
        width = len(header)
        trials, labels, rows = [], [], []
        for line, cells in enumerate(reader, start=2):
            if len(cells) != width:
                raise DataFormatError(
                    f"expected {width} columns, got {len(cells)}", line
                )
            try:
                trials.append(int(cells[0]))
                labels.append(float(cells[1]))
                rows.append([float(v) for v in cells[2:]])
            except ValueError as exc:
                raise DataFormatError(str(exc), line) from exc
    return (
        np.array(trials, dtype=np.int64),
        np.array(labels),
        np.array(rows).reshape(len(rows), width - 2),
    )
