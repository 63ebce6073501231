"""
Model checkpoints as `.npz` archives (no pickle):

    __format__    "cmkd-checkpoint"
    __version__   1
    __meta__      JSON: role, frozen, extractor_config, head_config,
                  prototype_source, metadata
    param/<name>  float64 parameter arrays
    prototypes/phi (optional)
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from cmkd.exceptions import CheckpointError
from cmkd.models import ModelParams, build_model
from cmkd.prototypes import PrototypeBank
from cmkd.schemas import ExtractorConfig, HeadConfig, PrototypeSource
from cmkd.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = "cmkd-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    model: ModelParams
    prototypes: Optional[PrototypeBank] = None
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(
    path: Union[str, Path],
    model: ModelParams,
    prototypes: Optional[PrototypeBank] = None,
    metadata: Optional[dict[str, Any]] = None,
) -> None:
    meta = {
        "role": model.role,
        "frozen": model.frozen,
        "extractor_config": model.extractor_config.model_dump(mode="json"),
        "head_config": model.head_config.model_dump(mode="json"),
        "prototype_source": None if prototypes is None else prototypes.source.value,
        "metadata": metadata or {},
    }
    arrays: dict[str, np.ndarray] = {
        "__format__": np.array(MAGIC),
        "__version__": np.array(VERSION),
        "__meta__": np.array(json.dumps(meta, sort_keys=True)),
    }
    for name, values in model.state_dict().items():
        arrays[f"param/{name}"] = values
    if prototypes is not None:
        arrays["prototypes/phi"] = prototypes.phi.numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    logger.debug("wrote %s checkpoint %s", model.role, path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"{path} is not a checkpoint archive: {exc}") from exc
    with archive:
        if "__format__" not in archive or str(archive["__format__"]) != MAGIC:
            raise CheckpointError(f"{path}: missing {MAGIC!r} magic string")
        version = int(archive["__version__"])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(str(archive["__meta__"]))
        state = {
            key.removeprefix("param/"): archive[key]
            for key in archive.files
            if key.startswith("param/")
        }
        phi = archive["prototypes/phi"] if "prototypes/phi" in archive else None

    model = build_model(
        ExtractorConfig.model_validate(meta["extractor_config"]),
        HeadConfig.model_validate(meta["head_config"]),
        np.random.default_rng(0),
        role=meta["role"],
    )
    try:
        model.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(
            f"{path}: parameters do not fit the configs: {exc}"
        ) from exc
    if meta["frozen"]:
        model.freeze()

    prototypes = None
    if phi is not None:
        prototypes = PrototypeBank(
            Tensor(phi, requires_grad=not meta["frozen"], name="prototypes"),
            PrototypeSource(meta["prototype_source"]),
        )
    return Checkpoint(model=model, prototypes=prototypes, metadata=meta["metadata"])
