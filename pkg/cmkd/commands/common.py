"""Helpers shared by the command modules: config files, overrides and output."""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import yaml
from pydantic import BaseModel, ValidationError

from cmkd.data import PairedDataset, generate, load_dataset
from cmkd.exceptions import ConfigError
from cmkd.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

# (flag dest, config path)
Override = tuple[str, tuple[str, ...]]

TRAINING_OVERRIDES: list[Override] = [
    ("seed", ("train", "seed")),
    ("epochs", ("train", "epochs")),
    ("teacher_epochs", ("train", "teacher_epochs")),
    ("folds", ("train", "folds")),
    ("batch_size", ("train", "batch_size")),
    ("patience", ("train", "patience")),
    ("lambda_sim", ("loss", "weights", "sim")),
    ("lambda_unc", ("loss", "weights", "unc")),
    ("lambda_kd", ("loss", "weights", "kd")),
    ("lambda_task", ("loss", "weights", "task")),
    ("kd_mode", ("loss", "kd_mode")),
    ("uncertainty_form", ("loss", "uncertainty_form")),
]


def read_config_file(path: Optional[Union[str, Path]]) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            document = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from exc
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"{path} must hold a mapping of config sections")
    return document


def apply_overrides(
    document: dict[str, Any], args: argparse.Namespace, overrides: Iterable[Override]
) -> dict[str, Any]:
    """Flags win over the file; flags left at None are ignored."""
    for dest, path in overrides:
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = document
        for key in path[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            node = child
        node[path[-1]] = value
    return document


def load_experiment_config(
    args: argparse.Namespace, overrides: Iterable[Override] = ()
) -> ExperimentConfig:
    document = apply_overrides(read_config_file(args.config), args, overrides)
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def load_or_generate(
    data_path: Optional[str], config: ExperimentConfig
) -> PairedDataset:
    if data_path is not None:
        return load_dataset(data_path)
    logger.info("no --data given, generating from the data section")
    return generate(config.data)


def write_json(payload: Union[BaseModel, dict[str, Any]], path: Path) -> None:
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def add_config_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config", help="YAML file with data/model/loss/train/eval sections"
    )


def add_training_arguments(parser: argparse.ArgumentParser) -> None:
    """Flags shared by `train` and `ablate`, see TRAINING_OVERRIDES."""
    parser.add_argument("--data", help="dataset CSV; generated from config if omitted")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--teacher-epochs", type=int)
    parser.add_argument("--folds", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--lambda-sim", type=float)
    parser.add_argument("--lambda-unc", type=float)
    parser.add_argument("--lambda-kd", type=float)
    parser.add_argument("--lambda-task", type=float)
    parser.add_argument("--kd-mode", choices=["cross_head", "logit"])
    parser.add_argument("--uncertainty-form", choices=["as_printed", "inverse"])
    parser.add_argument("--workers", type=int, help="fold worker processes")
