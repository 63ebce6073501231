"""
Paired-modality datasets: synthetic generator, CSV ingestion and the
group-by-trial fold splitter.

Dataset file (UTF-8 CSV):

    #cmkd v1 task=<dec|cer> S=<int> T=<int> C=<int|0>
    trial_id,y,xs_0..xs_{S-1},xt_0..xt_{T-1}
    <int>,<label>,<S + T decimals>

Floats are written with 17 significant digits so a write/read round trip is
lossless.
"""

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from cmkd.exceptions import DataError, DataFormatError
from cmkd.schemas import GeneratorSpec, Task
from cmkd.tensor import Tensor

logger = logging.getLogger(__name__)

FORMAT_TAG = "#cmkd v1"
HEADER_RE = re.compile(
    r"^#cmkd v1 task=(?P<task>dec|cer) S=(?P<S>\d+) T=(?P<T>\d+) C=(?P<C>\d+)$"
)


def format_float(value: float) -> str:
    return format(float(value), ".17g")


@dataclass(frozen=True)
class PairedSample:
    trial_id: int
    x_s: np.ndarray
    x_t: np.ndarray
    y_class: Optional[int] = None
    y_cont: Optional[float] = None
    y_clean: Optional[float] = field(default=None, repr=False)


@dataclass(frozen=True)
class PairedBatch:
    x_s: Tensor
    x_t: Tensor
    y: np.ndarray
    trial_ids: np.ndarray
    task: Task

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class PairedDataset:
    task: Task
    trial_ids: np.ndarray  # [N] int
    x_s: np.ndarray  # [N, S]
    x_t: np.ndarray  # [N, T]
    y: np.ndarray  # [N] int (DEC) or float (CER)
    num_classes: int = 0
    y_clean: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        n = self.trial_ids.shape[0]
        if self.x_s.shape[0] != n or self.x_t.shape[0] != n or self.y.shape[0] != n:
            raise DataError("dataset arrays disagree on the number of samples")
        if self.task is Task.DEC:
            if self.num_classes < 2:
                raise DataError("DEC datasets need at least 2 classes")
            if n and (self.y.min() < 0 or self.y.max() >= self.num_classes):
                raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.trial_ids.shape[0])

    @property
    def student_dim(self) -> int:
        return int(self.x_s.shape[1])

    @property
    def teacher_dim(self) -> int:
        return int(self.x_t.shape[1])

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task is Task.DEC else 1

    def trials(self) -> list[int]:
        return sorted(int(t) for t in np.unique(self.trial_ids))

    def sample(self, i: int) -> PairedSample:
        clean = None if self.y_clean is None else self.y_clean[i].item()
        if self.task is Task.DEC:
            return PairedSample(
                int(self.trial_ids[i]), self.x_s[i], self.x_t[i],
                y_class=int(self.y[i]), y_clean=clean,
            )
        return PairedSample(
            int(self.trial_ids[i]), self.x_s[i], self.x_t[i],
            y_cont=float(self.y[i]), y_clean=clean,
        )

    def __iter__(self) -> Iterator[PairedSample]:
        return (self.sample(i) for i in range(len(self)))

    def subset(self, indices: np.ndarray) -> "PairedDataset":
        return PairedDataset(
            task=self.task,
            trial_ids=self.trial_ids[indices],
            x_s=self.x_s[indices],
            x_t=self.x_t[indices],
            y=self.y[indices],
            num_classes=self.num_classes,
            y_clean=None if self.y_clean is None else self.y_clean[indices],
        )

    def batch(self, indices: Optional[np.ndarray] = None) -> PairedBatch:
        idx = np.arange(len(self)) if indices is None else indices
        return PairedBatch(
            x_s=Tensor(self.x_s[idx]),
            x_t=Tensor(self.x_t[idx]),
            y=self.y[idx],
            trial_ids=self.trial_ids[idx],
            task=self.task,
        )


def batch_indices(
    indices: np.ndarray, batch_size: int, rng: Optional[np.random.Generator] = None
) -> list[np.ndarray]:
    """
    Shuffle (when rng is given) and chunk; a trailing chunk of fewer than two
    samples is merged into the previous one since the batch losses need N >= 2.
    """
    order = rng.permutation(indices) if rng is not None else np.asarray(indices)
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


# Generator


def generate(spec: GeneratorSpec) -> PairedDataset:
    """
    Trial-conditioned latents z -> high-quality teacher view and a noisier,
    differently warped student view. Labels are read out from z and then
    corrupted (symmetric flips for DEC, additive Gaussian noise for CER).
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_trials * spec.samples_per_trial
    k = spec.latent_dim

    trial_means = rng.normal(0.0, spec.trial_spread, size=(spec.n_trials, k))
    trial_ids = np.repeat(np.arange(spec.n_trials), spec.samples_per_trial)
    z = trial_means[trial_ids] + rng.standard_normal((n, k))

    a_t = rng.standard_normal((k, spec.teacher_dim)) / np.sqrt(k)
    a_s = rng.standard_normal((k, spec.student_dim)) / np.sqrt(k)
    x_t = np.tanh(z @ a_t) + spec.teacher_noise_scale * rng.standard_normal(
        (n, spec.teacher_dim)
    )
    warped = z @ a_s
    x_s = warped / (1.0 + np.abs(warped)) + spec.student_noise_scale * (
        rng.standard_normal((n, spec.student_dim))
    )

    if spec.task is Task.DEC:
        readout = rng.standard_normal((k, spec.num_classes))
        y_clean = np.argmax(z @ readout, axis=1).astype(np.int64)
        flip = rng.random(n) < spec.label_noise
        offset = rng.integers(1, spec.num_classes, size=n)
        y = np.where(flip, (y_clean + offset) % spec.num_classes, y_clean)
        counts = np.bincount(y_clean, minlength=spec.num_classes)
        if np.any(counts < 5):
            logger.warning("generated classes are unbalanced: %s", counts.tolist())
        num_classes = spec.num_classes
    else:
        w = rng.standard_normal(k) / np.sqrt(k)
        y_clean = z @ w
        y = y_clean + spec.label_noise * rng.standard_normal(n)
        num_classes = 0

    logger.debug(
        "generated %d %s samples over %d trials", n, spec.task.value, spec.n_trials
    )
    return PairedDataset(
        task=spec.task,
        trial_ids=trial_ids,
        x_s=x_s,
        x_t=x_t,
        y=y,
        num_classes=num_classes,
        y_clean=y_clean,
    )


# Group-by-trial folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: dict[int, int]  # trial_id -> fold index

    def trials_in(self, fold: int) -> list[int]:
        return sorted(t for t, f in self.assignments.items() if f == fold)

    def fold_sizes(self) -> list[int]:
        return [len(self.trials_in(f)) for f in range(self.k)]

    def val_indices(self, dataset: PairedDataset, fold: int) -> np.ndarray:
        trials = self.trials_in(fold)
        return np.flatnonzero(np.isin(dataset.trial_ids, trials))

    def train_indices(self, dataset: PairedDataset, fold: int) -> np.ndarray:
        trials = self.trials_in(fold)
        return np.flatnonzero(~np.isin(dataset.trial_ids, trials))


def split_group_by_trial(dataset: PairedDataset, k: int, seed: int) -> FoldPlan:
    """Shuffle trials with `seed` and deal them round-robin into k folds."""
    trials = dataset.trials()
    if len(trials) < k:
        raise DataError(f"{len(trials)} trials cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(trials)
    return FoldPlan(k=k, assignments={int(t): i % k for i, t in enumerate(order)})


# File I/O


def save_dataset(dataset: PairedDataset, path: Union[str, Path]) -> None:
    s, t = dataset.student_dim, dataset.teacher_dim
    header = (
        f"{FORMAT_TAG} task={dataset.task.value} S={s} T={t} C={dataset.num_classes}"
    )
    columns = (
        ["trial_id", "y"]
        + [f"xs_{i}" for i in range(s)]
        + [f"xt_{i}" for i in range(t)]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(header + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for i in range(len(dataset)):
            label = (
                str(int(dataset.y[i]))
                if dataset.task is Task.DEC
                else format_float(dataset.y[i])
            )
            writer.writerow(
                [str(int(dataset.trial_ids[i])), label]
                + [format_float(v) for v in dataset.x_s[i]]
                + [format_float(v) for v in dataset.x_t[i]]
            )


def _parse_float(cell: str, line: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataFormatError(f"non-numeric value {cell!r} in {column}", line)
    if not np.isfinite(value):
        raise DataFormatError(f"non-finite value {cell!r} in {column}", line)
    return value


def load_dataset(path: Union[str, Path]) -> PairedDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n")
        match = HEADER_RE.match(header)
        if match is None:
            raise DataFormatError(f"malformed header {header!r}", 1)
        task = Task(match["task"])
        s, t, c = int(match["S"]), int(match["T"]), int(match["C"])
        if task is Task.DEC and c < 2:
            raise DataFormatError("DEC files need C >= 2", 1)

        reader = csv.reader(fh)
        expected = (
            ["trial_id", "y"]
            + [f"xs_{i}" for i in range(s)]
            + [f"xt_{i}" for i in range(t)]
        )
        names = next(reader, None)
        if names != expected:
            raise DataFormatError("column names do not match the header dims", 2)

        width = 2 + s + t
        trial_ids, labels, rows = [], [], []
        seen: set[tuple[int, bytes]] = set()
        for line, cells in enumerate(reader, start=3):
            if not cells:
                continue
            if len(cells) != width:
                raise DataFormatError(
                    f"expected {width} columns (2 + S + T), got {len(cells)}", line
                )
            try:
                trial = int(cells[0])
            except ValueError:
                raise DataFormatError(f"trial_id {cells[0]!r} is not an integer", line)
            if task is Task.DEC:
                try:
                    class_label = int(cells[1])
                except ValueError:
                    raise DataFormatError(
                        f"class label {cells[1]!r} is not an integer", line
                    )
                if not 0 <= class_label < c:
                    raise DataFormatError(
                        f"class label {class_label} outside [0, {c})", line
                    )
                label = float(class_label)
            else:
                label = _parse_float(cells[1], line, "y")
            values = np.array(
                [
                    _parse_float(v, line, name)
                    for v, name in zip(cells[2:], expected[2:])
                ]
            )
            key = (trial, values.tobytes())
            if key in seen:
                raise DataFormatError(f"duplicate sample in trial {trial}", line)
            seen.add(key)
            trial_ids.append(trial)
            labels.append(label)
            rows.append(values)

    data = np.array(rows).reshape(len(rows), width - 2)
    return PairedDataset(
        task=task,
        trial_ids=np.array(trial_ids, dtype=np.int64),
        x_s=data[:, :s],
        x_t=data[:, s:],
        y=np.array(labels, dtype=np.int64 if task is Task.DEC else np.float64),
        num_classes=c if task is Task.DEC else 0,
    )
