import enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

REPORT_SCHEMA_VERSION = "cmkd.run_report/1"


class Task(str, enum.Enum):
    DEC = "dec"
    CER = "cer"


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"


class UncertaintyForm(str, enum.Enum):
    AS_PRINTED = "as_printed"
    INVERSE = "inverse"


class PrototypeSource(str, enum.Enum):
    LEARNED = "learned"
    CLASS_MEAN_INIT = "class_mean_init"


class KdMode(str, enum.Enum):
    CROSS_HEAD = "cross_head"
    LOGIT = "logit"


class LrSchedule(str, enum.Enum):
    COSINE = "cosine"
    EXPONENTIAL = "exponential"
    STEP = "step"


class Monitor(str, enum.Enum):
    VAL_TOTAL_LOSS = "val_total_loss"
    VAL_TASK_LOSS = "val_task_loss"
    VAL_METRIC = "val_metric"


LOSS_TERMS = ("sim", "unc", "kd", "task")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


# Model schemas
class ExtractorConfig(StrictModel):
    input_dim: Optional[int] = Field(None, ge=1)
    hidden_dims: list[int] = Field(default_factory=lambda: [64])
    feature_dim: int = Field(32, ge=1)
    embed_dim: int = Field(16, ge=1)
    activation: Activation = Activation.RELU

    @field_validator("hidden_dims")
    @classmethod
    def positive_dims(cls, v: list[int]) -> list[int]:
        if any(d < 1 for d in v):
            raise ValueError("hidden dims must be >= 1")
        return v


class HeadConfig(StrictModel):
    layer_dims: list[int] = Field(..., min_length=1)
    injection_layer: Optional[int] = None
    output_dim: int = Field(..., ge=1)
    activation: Activation = Activation.RELU

    @model_validator(mode="after")
    def check_layers(self) -> "HeadConfig":
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer dims must be >= 1")
        if self.layer_dims[-1] != self.output_dim:
            raise ValueError("layer_dims must end in output_dim")
        if self.injection_layer is not None and not (
            1 <= self.injection_layer < len(self.layer_dims)
        ):
            raise ValueError(
                f"injection_layer must lie in [1, {len(self.layer_dims)}), "
                f"got {self.injection_layer}"
            )
        return self

    @property
    def resolved_injection_layer(self) -> int:
        """Defaults to the layer just before the final projection."""
        if self.injection_layer is not None:
            return self.injection_layer
        return len(self.layer_dims) - 1


class ModelSection(StrictModel):
    student: ExtractorConfig = Field(default_factory=ExtractorConfig)
    teacher: ExtractorConfig = Field(default_factory=ExtractorConfig)
    student_head_hidden: list[int] = Field(default_factory=lambda: [32])
    teacher_head_hidden: list[int] = Field(default_factory=lambda: [32])
    injection_layer: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def shared_latent_space(self) -> "ModelSection":
        if self.student.embed_dim != self.teacher.embed_dim:
            raise ValueError("student and teacher embed_dim must match")
        return self


# Loss schemas
class LossWeights(StrictModel):
    """λ1..λ4 of the weighted total, in order sim, unc, kd, task."""

    sim: float = Field(1.0, ge=0)
    unc: float = Field(1.0, ge=0)
    kd: float = Field(1.0, ge=0)
    task: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def at_least_one(self) -> "LossWeights":
        if all(getattr(self, name) == 0 for name in LOSS_TERMS):
            raise ValueError("at least one loss weight must be positive")
        return self

    def mask(self) -> dict[str, bool]:
        return {name: getattr(self, name) > 0 for name in LOSS_TERMS}


class LossConfig(StrictModel):
    beta: float = Field(5.0, gt=0)
    tau: float = Field(1.0, gt=0)
    delta: float = Field(0.2, gt=0)
    weights: LossWeights = Field(default_factory=LossWeights)
    uncertainty_form: UncertaintyForm = UncertaintyForm.AS_PRINTED
    prototype_source: PrototypeSource = PrototypeSource.CLASS_MEAN_INIT
    num_bins: int = Field(3, ge=2)
    kd_mode: KdMode = KdMode.CROSS_HEAD
    kd_temperature: float = Field(1.0, gt=0)


# Data schemas
class GeneratorSpec(StrictModel):
    task: Task = Task.DEC
    n_trials: int = Field(27, ge=1)
    samples_per_trial: int = Field(40, ge=1)
    latent_dim: int = Field(6, ge=1)
    student_dim: int = Field(32, ge=1)
    teacher_dim: int = Field(64, ge=1)
    num_classes: int = Field(3, ge=2)
    label_noise: float = Field(0.0, ge=0, le=1)
    student_noise_scale: float = Field(1.0, ge=0)
    teacher_noise_scale: float = Field(0.05, ge=0)
    trial_spread: float = Field(1.0, ge=0)
    seed: int = Field(0, ge=0)


# Training schemas
class TrainConfig(StrictModel):
    epochs: int = Field(100, ge=1)
    teacher_epochs: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=2)
    lr_start: float = Field(1e-3, gt=0)
    lr_end: float = Field(1e-6, gt=0)
    lr_schedule: LrSchedule = LrSchedule.COSINE
    patience: int = Field(20, ge=1)
    folds: int = Field(5, ge=2)
    seed: int = Field(0, ge=0)
    monitor: Monitor = Monitor.VAL_TOTAL_LOSS
    # share of trials held out to early-stop the teacher; 0 trains on all of them
    teacher_holdout: float = Field(0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def check_ranges(self) -> "TrainConfig":
        if self.lr_start < self.lr_end:
            raise ValueError("lr_start must be >= lr_end")
        if self.patience > self.epochs:
            raise ValueError("patience must be <= epochs")
        return self


DEFAULT_ABLATION_MASKS: list[list[str]] = [
    ["sim"],
    ["unc"],
    ["kd"],
    ["sim", "unc"],
    ["sim", "kd"],
    ["unc", "kd"],
    ["sim", "unc", "kd"],
]


class AblationGrid(StrictModel):
    masks: list[list[str]] = Field(
        default_factory=lambda: [list(m) for m in DEFAULT_ABLATION_MASKS],
        min_length=1,
    )

    @field_validator("masks")
    @classmethod
    def check_masks(cls, v: list[list[str]]) -> list[list[str]]:
        seen: set[frozenset[str]] = set()
        normalized = []
        for mask in v:
            terms = set(mask) | {"task"}
            unknown = terms - set(LOSS_TERMS)
            if unknown:
                raise ValueError(f"unknown loss terms {sorted(unknown)}")
            key = frozenset(terms)
            if key in seen:
                raise ValueError(f"duplicate mask {sorted(terms)}")
            seen.add(key)
            normalized.append([name for name in LOSS_TERMS if name in terms])
        return normalized


class EvalSection(StrictModel):
    ablation: AblationGrid = Field(default_factory=AblationGrid)


class ExperimentConfig(StrictModel):
    """The CLI config file: sections data, model, loss, train, eval."""

    data: GeneratorSpec = Field(default_factory=GeneratorSpec)
    model: ModelSection = Field(default_factory=ModelSection)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalSection = Field(default_factory=EvalSection)


# Report schemas
class MetricSummary(BaseModel):
    mean: float
    std: float
    values: list[float]


class EpochTrace(BaseModel):
    epoch: int
    lr: float
    train_losses: dict[str, float]
    val_task_loss: float
    val_total_loss: float
    val_metrics: dict[str, float]


class FoldRecord(BaseModel):
    fold: int
    train_trials: list[int]
    val_trials: list[int]
    n_train: int
    n_val: int
    best_epoch: int
    stopped_epoch: int
    best_monitor: float
    metrics: dict[str, float]
    clean_metrics: dict[str, float] = {}
    op_counts: dict[str, int] = {}
    trace: list[EpochTrace] = []


class TeacherSummary(BaseModel):
    epochs: int
    best_epoch: int
    holdout_trials: list[int] = []
    train_metrics: dict[str, float]


class RunReport(BaseModel):
    schema_version: str = REPORT_SCHEMA_VERSION
    task: Task
    seed: int
    config: ExperimentConfig
    ablation_mask: dict[str, bool]
    teacher: TeacherSummary
    folds: list[FoldRecord]
    aggregate: dict[str, MetricSummary]
    clean_aggregate: dict[str, MetricSummary] = {}


class AblationRow(BaseModel):
    mask: dict[str, bool]
    report: RunReport


class AblationTable(BaseModel):
    task: Task
    rows: list[AblationRow]
