"""
Teacher pretraining, per-fold student distillation and the K-fold driver.

The teacher is trained once with the task loss alone, early-stopped on a
held-out share of the trials, and then frozen for all folds. Each fold
trains a fresh student (and, when the uncertainty term is on, a prototype
bank) with the λ-weighted objective, validates on its held-out trials after
every epoch (by default on the whole weighted objective) and restores the
best epoch once early stopping fires or the epoch budget runs out.
"""

import hashlib
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cache
from typing import Optional

import numpy as np
from pydantic import ValidationError

from cmkd import instrumentation
from cmkd.config import get_settings
from cmkd.data import (
    FoldPlan,
    PairedBatch,
    PairedDataset,
    batch_indices,
    split_group_by_trial,
)
from cmkd.exceptions import (
    CmkdError,
    ConfigError,
    DataError,
    FoldError,
    NumericalError,
    TrainingError,
)
from cmkd.losses import info_nce, loss_kd, loss_task, loss_total, similarity_matrix
from cmkd.metrics import aggregate, primary_metric, task_metrics
from cmkd.models import (
    ModelParams,
    build_model,
    check_injection,
    extract,
    head_forward,
    head_forward_from_layer,
)
from cmkd.optim import Adam, EarlyStopState, learning_rate
from cmkd.prototypes import (
    PrototypeBank,
    bin_continuous_labels,
    dirichlet_alpha,
    init_prototypes,
    loss_unc,
    random_prototypes,
    uncertainty,
)
from cmkd.schemas import (
    EpochTrace,
    ExperimentConfig,
    ExtractorConfig,
    FoldRecord,
    HeadConfig,
    KdMode,
    LossConfig,
    Monitor,
    PrototypeSource,
    RunReport,
    Task,
    TeacherSummary,
)
from cmkd.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

TEACHER_STREAM = 0
FOLD_STREAM = 1
EARLY_STOP_WARNING_EPOCH = 10
AGGREGATE_TOLERANCE = 1e-12


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys); the teacher uses (0,), fold k (1, k)."""
    return np.random.default_rng([seed, *keys])


@dataclass(frozen=True)
class ResolvedModels:
    student_extractor: ExtractorConfig
    student_head: HeadConfig
    teacher_extractor: ExtractorConfig
    teacher_head: HeadConfig


def _with_input_dim(config: ExtractorConfig, width: int, role: str) -> ExtractorConfig:
    if config.input_dim is not None and config.input_dim != width:
        raise ConfigError(
            f"{role} input_dim {config.input_dim} does not match the dataset ({width})"
        )
    return config.model_copy(update={"input_dim": width})


def resolve_model_configs(
    config: ExperimentConfig, dataset: PairedDataset
) -> ResolvedModels:
    """Fill the input and output widths in from the dataset and check injection."""
    section = config.model
    out = dataset.output_dim
    try:
        student_head = HeadConfig(
            layer_dims=[*section.student_head_hidden, out],
            output_dim=out,
            activation=section.student.activation,
        )
        teacher_head = HeadConfig(
            layer_dims=[*section.teacher_head_hidden, out],
            injection_layer=section.injection_layer,
            output_dim=out,
            activation=section.teacher.activation,
        )
    except ValidationError as exc:
        raise ConfigError(f"invalid head configuration: {exc}") from exc

    student_ext = _with_input_dim(section.student, dataset.student_dim, "student")
    teacher_ext = _with_input_dim(section.teacher, dataset.teacher_dim, "teacher")
    if config.loss.kd_mode is KdMode.CROSS_HEAD:
        if len(teacher_head.layer_dims) < 2:
            raise ConfigError(
                "cross-head distillation needs a teacher head hidden layer"
            )
        check_injection(student_ext, teacher_head)
    return ResolvedModels(student_ext, student_head, teacher_ext, teacher_head)


def params_digest(model: ModelParams) -> str:
    digest = hashlib.sha256()
    for name, values in model.state_dict().items():
        digest.update(name.encode())
        digest.update(values.tobytes())
    return digest.hexdigest()


# Evaluation helpers


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    """Raw head outputs (logits or values) without recording a tape."""
    with no_grad():
        f, _ = extract(model, Tensor(x))
        return head_forward(model, f).numpy()


def evaluate_split(
    model: ModelParams, dataset: PairedDataset, labels: Optional[np.ndarray] = None
) -> tuple[float, dict[str, float]]:
    """(task loss, task metrics) of `model` on `dataset`; `labels` overrides y."""
    y = dataset.y if labels is None else labels
    x = dataset.x_t if model.role == "teacher" else dataset.x_s
    with no_grad():
        f, _ = extract(model, Tensor(x))
        outputs = head_forward(model, f)
        try:
            task_loss = loss_task(outputs, y, dataset.task).item()
        except NumericalError:
            # two constant series: concordance undefined, score it as 0
            task_loss = 1.0
    metrics = task_metrics(dataset.task, outputs.numpy(), y, dataset.num_classes)
    return task_loss, metrics


# Teacher


def teacher_holdout_trials(
    dataset: PairedDataset, fraction: float, rng: np.random.Generator
) -> list[int]:
    """Trials kept out of teacher training to early-stop it; empty for 0."""
    trials = dataset.trials()
    if fraction == 0 or len(trials) < 2:
        return []
    n = min(max(1, round(fraction * len(trials))), len(trials) - 1)
    return sorted(int(t) for t in rng.permutation(trials)[:n])


def pretrain_teacher(
    dataset: PairedDataset, config: ExperimentConfig
) -> tuple[ModelParams, TeacherSummary]:
    """
    Task-loss training on the rich modality. With `train.teacher_holdout` > 0
    a share of the trials is held out and the epoch with the lowest held-out
    task loss is kept, so the teacher stops before it memorizes label noise.
    """
    models = resolve_model_configs(config, dataset)
    train = config.train
    rng = rng_for(train.seed, TEACHER_STREAM)
    teacher = build_model(
        models.teacher_extractor, models.teacher_head, rng, role="teacher"
    )
    holdout = teacher_holdout_trials(dataset, train.teacher_holdout, rng)
    held = np.isin(dataset.trial_ids, holdout)
    indices = np.flatnonzero(~held)
    heldout = dataset.subset(np.flatnonzero(held)) if holdout else None
    stopper = EarlyStopState(min(train.patience, train.teacher_epochs))
    opt = Adam(teacher.parameters(), lr=train.lr_start)
    best_epoch = train.teacher_epochs - 1

    for epoch in range(train.teacher_epochs):
        lr = learning_rate(
            epoch, train.teacher_epochs, train.lr_start, train.lr_end, train.lr_schedule
        )
        for b, idx in enumerate(batch_indices(indices, train.batch_size, rng)):
            batch = dataset.batch(idx)
            try:
                f_t, _ = extract(teacher, batch.x_t)
                loss = loss_task(head_forward(teacher, f_t), batch.y, dataset.task)
                opt.zero_grad()
                backward(loss)
            except NumericalError as exc:
                raise TrainingError(
                    f"teacher diverged at epoch {epoch}, batch {b}: {exc.detail}"
                ) from exc
            opt.step(lr)
        if heldout is None:
            continue
        held_loss, _ = evaluate_split(teacher, heldout)
        logger.debug("teacher epoch %d held-out task=%.5f", epoch, held_loss)
        if stopper.update(epoch, held_loss, teacher.state_dict()):
            break

    if heldout is not None:
        best_epoch = stopper.best_epoch
        teacher.load_state_dict(stopper.best_checkpoint)
    teacher.freeze()
    _, train_metrics = evaluate_split(teacher, dataset)
    logger.info(
        "teacher pretrained, best epoch %d of %d: %s",
        best_epoch, train.teacher_epochs, train_metrics,
    )
    summary = TeacherSummary(
        epochs=train.teacher_epochs,
        best_epoch=best_epoch,
        holdout_trials=holdout,
        train_metrics=train_metrics,
    )
    return teacher, summary


# Student


def student_objective(
    student: ModelParams,
    teacher: ModelParams,
    bank: Optional[PrototypeBank],
    batch: PairedBatch,
    loss_config: LossConfig,
    values: Optional[dict[str, float]] = None,
) -> Tensor:
    """
    λ-weighted total loss of one batch. Every intermediate is computed on
    demand, so a term with weight 0 never touches the teacher, the similarity
    matrix, the prototypes or the injection path.
    """
    weights = loss_config.weights
    f_s, e_s = extract(student, batch.x_s)

    @cache
    def teacher_pass() -> tuple[Tensor, Tensor]:
        with no_grad():
            f_t, e_t = extract(teacher, batch.x_t)
            return head_forward(teacher, f_t), e_t

    @cache
    def student_output() -> Tensor:
        return head_forward(student, f_s)

    @cache
    def q_batch() -> Tensor:
        return similarity_matrix(e_s, teacher_pass()[1], loss_config.beta)

    def sim_part() -> Tensor:
        return info_nce(q_batch())

    def unc_part() -> Tensor:
        if bank is None:
            raise ConfigError("the uncertainty term needs a prototype bank")
        alpha = dirichlet_alpha(e_s, bank, loss_config.beta, loss_config.tau)
        u = uncertainty(alpha, loss_config.uncertainty_form)
        return loss_unc(u, q_batch(), loss_config.delta)

    def kd_part() -> Tensor:
        y_t = teacher_pass()[0]
        if loss_config.kd_mode is KdMode.LOGIT:
            return loss_kd(
                y_t, student_output(), batch.task, loss_config.kd_temperature
            )
        layer = teacher.head_config.resolved_injection_layer
        return loss_kd(y_t, head_forward_from_layer(teacher, f_s, layer), batch.task)

    def task_part() -> Tensor:
        return loss_task(student_output(), batch.y, batch.task)

    parts = {"sim": sim_part, "unc": unc_part, "kd": kd_part, "task": task_part}
    return loss_total(parts, weights, values)


def prototype_labels(dataset: PairedDataset, num_bins: int) -> tuple[np.ndarray, int]:
    """Class labels for DEC, equal-width bins of the label range for CER."""
    if dataset.task is Task.DEC:
        return dataset.y.astype(np.int64), dataset.num_classes
    return bin_continuous_labels(dataset.y, num_bins), num_bins


def build_prototypes(
    teacher: ModelParams,
    train: PairedDataset,
    loss_config: LossConfig,
    rng: np.random.Generator,
) -> PrototypeBank:
    labels, c = prototype_labels(train, loss_config.num_bins)
    if loss_config.prototype_source is PrototypeSource.LEARNED:
        return random_prototypes(c, teacher.extractor_config.embed_dim, rng)
    with no_grad():
        _, e_t = extract(teacher, Tensor(train.x_t))
    return init_prototypes(e_t, labels, c)


def validation_objective(
    student: ModelParams,
    teacher: ModelParams,
    bank: Optional[PrototypeBank],
    val: PairedDataset,
    loss_config: LossConfig,
    task_loss: float,
) -> float:
    """
    λ-weighted objective over the whole validation split as one batch, with
    `task_loss` standing in for the task part.
    """
    weights = loss_config.weights
    total = weights.task * task_loss
    if not any(weights.mask()[name] for name in ("sim", "unc", "kd")):
        return total
    aux = loss_config.model_copy(
        update={"weights": weights.model_copy(update={"task": 0.0})}
    )
    with no_grad():
        batch = val.batch(np.arange(len(val)))
        return total + student_objective(student, teacher, bank, batch, aux).item()


@dataclass
class FoldResult:
    student: ModelParams
    prototypes: Optional[PrototypeBank]
    record: FoldRecord


def train_student_fold(
    dataset: PairedDataset,
    plan: FoldPlan,
    fold: int,
    teacher: ModelParams,
    config: ExperimentConfig,
) -> FoldResult:
    if not teacher.frozen:
        raise ConfigError("the teacher must be pretrained and frozen first")
    train_cfg, loss_cfg = config.train, config.loss
    train_idx = plan.train_indices(dataset, fold)
    val_idx = plan.val_indices(dataset, fold)
    if len(val_idx) == 0 or len(train_idx) < 2:
        raise DataError(
            f"fold {fold} is empty: {len(train_idx)} train / {len(val_idx)} val samples"
        )

    models = resolve_model_configs(config, dataset)
    rng = rng_for(train_cfg.seed, FOLD_STREAM, fold)
    student = build_model(models.student_extractor, models.student_head, rng)
    bank = None
    if loss_cfg.weights.unc > 0:
        bank = build_prototypes(teacher, dataset.subset(train_idx), loss_cfg, rng)

    params = student.parameters() + ([bank.phi] if bank is not None else [])
    opt = Adam(params, lr=train_cfg.lr_start)
    metric_name, metric_mode = primary_metric(dataset.task)
    by_metric = train_cfg.monitor is Monitor.VAL_METRIC
    stopper = EarlyStopState(
        train_cfg.patience, mode=metric_mode if by_metric else "min"
    )
    val = dataset.subset(val_idx)
    trace: list[EpochTrace] = []
    stopped_epoch = train_cfg.epochs - 1

    with instrumentation.measure() as op_counts:
        for epoch in range(train_cfg.epochs):
            lr = learning_rate(
                epoch, train_cfg.epochs, train_cfg.lr_start, train_cfg.lr_end,
                train_cfg.lr_schedule,
            )
            sums: dict[str, float] = defaultdict(float)
            batches = batch_indices(train_idx, train_cfg.batch_size, rng)
            for b, idx in enumerate(batches):
                values: dict[str, float] = {}
                try:
                    loss = student_objective(
                        student, teacher, bank, dataset.batch(idx), loss_cfg, values
                    )
                    opt.zero_grad()
                    backward(loss)
                except NumericalError as exc:
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b}: {exc.detail}"
                    ) from exc
                opt.step(lr)
                values["total"] = loss.item()
                for name, value in values.items():
                    sums[name] += value

            val_loss, val_metrics = evaluate_split(student, val)
            val_total = validation_objective(
                student, teacher, bank, val, loss_cfg, val_loss
            )
            trace.append(
                EpochTrace(
                    epoch=epoch,
                    lr=lr,
                    train_losses={k: v / len(batches) for k, v in sums.items()},
                    val_task_loss=val_loss,
                    val_total_loss=val_total,
                    val_metrics=val_metrics,
                )
            )
            logger.debug(
                "fold %d epoch %d lr=%.3g total=%.5f val_total=%.5f val_task=%.5f %s",
                fold, epoch, lr, sums["total"] / len(batches), val_total, val_loss,
                val_metrics,
            )
            score = {
                Monitor.VAL_TOTAL_LOSS: val_total,
                Monitor.VAL_TASK_LOSS: val_loss,
                Monitor.VAL_METRIC: val_metrics[metric_name],
            }[train_cfg.monitor]
            snapshot = (
                student.state_dict(),
                None if bank is None else bank.phi.numpy(),
            )
            if stopper.update(epoch, score, snapshot):
                stopped_epoch = epoch
                break

    early = stopped_epoch < train_cfg.epochs - 1
    if early and stopped_epoch < EARLY_STOP_WARNING_EPOCH:
        logger.warning("fold %d stopped early at epoch %d", fold, stopped_epoch)

    state, phi = stopper.best_checkpoint
    student.load_state_dict(state)
    if bank is not None and phi is not None:
        bank.phi.assign_(phi)

    _, metrics = evaluate_split(student, val)
    clean_metrics: dict[str, float] = {}
    if val.y_clean is not None:
        _, clean_metrics = evaluate_split(student, val, labels=val.y_clean)

    record = FoldRecord(
        fold=fold,
        train_trials=sorted(set(dataset.trials()) - set(plan.trials_in(fold))),
        val_trials=plan.trials_in(fold),
        n_train=len(train_idx),
        n_val=len(val_idx),
        best_epoch=stopper.best_epoch,
        stopped_epoch=stopped_epoch,
        best_monitor=stopper.best_score,
        metrics=metrics,
        clean_metrics=clean_metrics,
        op_counts=dict(op_counts),
        trace=trace,
    )
    logger.info(
        "fold %d: best epoch %d, stopped at %d, %s",
        fold, record.best_epoch, stopped_epoch, metrics,
    )
    return FoldResult(student=student, prototypes=bank, record=record)


# Cross-validation


def resolve_workers(workers: Optional[int], folds: int) -> int:
    if workers is None:
        workers = get_settings().WORKERS or folds
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")
    return min(workers, folds)


def cross_validate(
    dataset: PairedDataset,
    config: ExperimentConfig,
    teacher: ModelParams,
    plan: FoldPlan,
    workers: Optional[int] = None,
) -> list[FoldResult]:
    """Train every fold of `plan`; results come back in fold order."""
    workers = resolve_workers(workers, plan.k)
    before = params_digest(teacher)
    results: list[FoldResult] = []

    if workers == 1:
        for fold in range(plan.k):
            try:
                results.append(train_student_fold(dataset, plan, fold, teacher, config))
            except CmkdError as exc:
                raise FoldError(fold, exc) from exc
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(train_student_fold, dataset, plan, fold, teacher, config)
                for fold in range(plan.k)
            ]
            for fold, future in enumerate(futures):
                try:
                    results.append(future.result())
                except CmkdError as exc:
                    raise FoldError(fold, exc) from exc

    if params_digest(teacher) != before:
        raise TrainingError("teacher parameters changed during student training")
    return results


def build_report(
    config: ExperimentConfig,
    dataset: PairedDataset,
    teacher: TeacherSummary,
    results: list[FoldResult],
) -> RunReport:
    records = [r.record for r in results]
    clean = [r.clean_metrics for r in records]
    report = RunReport(
        task=dataset.task,
        seed=config.train.seed,
        config=config,
        ablation_mask=config.loss.weights.mask(),
        teacher=teacher,
        folds=records,
        aggregate=aggregate([r.metrics for r in records]),
        clean_aggregate=aggregate(clean) if all(clean) else {},
    )
    check_report_consistency(report)
    return report


def check_report_consistency(report: RunReport) -> None:
    """The aggregate must be recomputable from the fold records."""
    expected = aggregate([f.metrics for f in report.folds])
    if set(expected) != set(report.aggregate):
        raise TrainingError("aggregate metrics do not match the fold records")
    for name, summary in expected.items():
        got = report.aggregate[name]
        if (
            abs(got.mean - summary.mean) > AGGREGATE_TOLERANCE
            or abs(got.std - summary.std) > AGGREGATE_TOLERANCE
        ):
            raise TrainingError(f"aggregate {name!r} disagrees with the fold records")


def run_cv(
    dataset: PairedDataset,
    config: ExperimentConfig,
    workers: Optional[int] = None,
) -> tuple[RunReport, ModelParams, list[FoldResult]]:
    """Pretrain once, train all K folds and aggregate mean ± std per metric."""
    plan = split_group_by_trial(dataset, config.train.folds, config.train.seed)
    logger.info(
        "cross-validating %d samples, %d trials, fold sizes %s",
        len(dataset), len(dataset.trials()), plan.fold_sizes(),
    )
    teacher, summary = pretrain_teacher(dataset, config)
    results = cross_validate(dataset, config, teacher, plan, workers)
    return build_report(config, dataset, summary, results), teacher, results
