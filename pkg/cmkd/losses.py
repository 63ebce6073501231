"""Loss terms of the distillation objective, each a differentiable scalar."""

from typing import Callable, Mapping, Optional, Union

import numpy as np
from scipy.special import xlogy

from cmkd import instrumentation
from cmkd.exceptions import DataError, NumericalError, ShapeError
from cmkd.schemas import LOSS_TERMS, LossWeights, Task
from cmkd.tensor import (
    Tensor,
    gather_columns,
    gather_diagonal,
    log_softmax_rows,
    matmul,
    mean,
    reshape,
    row_l2_normalize,
    sum,
    transpose,
)

LossPart = Union[Tensor, Callable[[], Tensor]]


def similarity_matrix(e_a: Tensor, e_b: Tensor, beta: float) -> Tensor:
    """Q[i, j] = beta * cos(e_a[i], e_b[j])."""
    if e_a.ndim != 2 or e_b.ndim != 2 or e_a.shape[1] != e_b.shape[1]:
        raise ShapeError(f"similarity: {e_a.shape} vs {e_b.shape}")
    instrumentation.count(instrumentation.SIMILARITY)
    return beta * matmul(row_l2_normalize(e_a), transpose(row_l2_normalize(e_b)))


def info_nce(q: Tensor) -> Tensor:
    """Mean negative log-probability of the diagonal under row-wise softmax."""
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ShapeError(f"info_nce needs a square similarity matrix, got {q.shape}")
    if q.shape[0] == 0:
        raise ShapeError("info_nce on an empty batch")
    return -mean(gather_diagonal(log_softmax_rows(q)))


def loss_sim(e_s: Tensor, e_t: Tensor, beta: float) -> Tensor:
    if e_s.shape != e_t.shape:
        raise ShapeError(f"loss_sim: {e_s.shape} vs {e_t.shape}")
    if e_s.shape[0] == 0:
        raise ShapeError("loss_sim on an empty batch")
    return info_nce(similarity_matrix(e_s, e_t, beta))


def loss_kd(
    y_t: Tensor, y_ts: Tensor, task: Task, temperature: float = 1.0
) -> Tensor:
    """
    DEC: mean KL(softmax(y_t / T) || softmax(y_ts / T)) * T².
    CER: mean squared error between y_t and y_ts.
    The teacher side is always treated as a constant.
    """
    if y_t.shape != y_ts.shape or y_t.ndim != 2:
        raise ShapeError(f"loss_kd: {y_t.shape} vs {y_ts.shape}")
    if not np.all(np.isfinite(y_t.data)):
        raise NumericalError("loss_kd: non-finite teacher logits")
    if task is Task.CER:
        diff = y_ts - y_t.detach()
        return mean(diff * diff)

    logits = y_t.data / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    p_t = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    neg_entropy = xlogy(p_t, p_t).sum(axis=1)
    scaled = y_ts if temperature == 1.0 else y_ts / temperature
    cross = sum(Tensor(p_t) * log_softmax_rows(scaled), axis=1)
    kl = mean(Tensor(neg_entropy) - cross)
    return kl if temperature == 1.0 else kl * (temperature * temperature)


def loss_ce(logits: Tensor, y: np.ndarray) -> Tensor:
    y = np.asarray(y)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"loss_ce: logits {logits.shape} with labels {y.shape}")
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise DataError(f"loss_ce: labels must lie in [0, {logits.shape[1]})")
    return -mean(gather_columns(log_softmax_rows(logits), y.astype(np.int64)))


def _as_column(t: Union[Tensor, np.ndarray]) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.ndim == 2 and t.shape[1] == 1:
        return reshape(t, (t.shape[0],))
    if t.ndim != 1:
        raise ShapeError(f"expected N or N×1 values, got {t.shape}")
    return t


def concordance(
    pred: Union[Tensor, np.ndarray], target: Union[Tensor, np.ndarray]
) -> Tensor:
    """Concordance correlation coefficient with population (1/N) statistics."""
    p, t = _as_column(pred), _as_column(target)
    if p.shape != t.shape:
        raise ShapeError(f"concordance: {p.shape} vs {t.shape}")
    if p.shape[0] < 2:
        raise ShapeError("concordance needs at least 2 samples")
    if np.ptp(p.data) == 0 and np.ptp(t.data) == 0:
        raise NumericalError("concordance is undefined for two constant series")
    mu_p, mu_t = mean(p), mean(t)
    dp, dt = p - mu_p, t - mu_t
    var_p, var_t = mean(dp * dp), mean(dt * dt)
    cov = mean(dp * dt)
    gap = mu_p - mu_t
    return 2.0 * cov / (var_p + var_t + gap * gap)


def loss_ccc(pred: Tensor, y: Union[Tensor, np.ndarray]) -> Tensor:
    return 1.0 - concordance(pred, y)


def loss_task(pred: Tensor, y: np.ndarray, task: Task) -> Tensor:
    if task is Task.DEC:
        return loss_ce(pred, y)
    return loss_ccc(pred, np.asarray(y, dtype=np.float64))


def loss_total(
    parts: Mapping[str, LossPart],
    weights: LossWeights,
    values: Optional[dict[str, float]] = None,
) -> Tensor:
    """
    λ-weighted sum over `sim`, `unc`, `kd`, `task`. Parts may be given as
    zero-argument callables; those with zero weight are never evaluated.
    Evaluated part values are written into `values` when given.
    """
    total: Optional[Tensor] = None
    for name in LOSS_TERMS:
        weight = getattr(weights, name)
        if weight == 0:
            continue
        if name not in parts:
            raise ShapeError(f"loss_total: missing part {name!r}")
        part = parts[name]
        term = part() if callable(part) else part
        if term.shape != ():
            raise ShapeError(f"loss part {name!r} is not a scalar")
        if values is not None:
            values[name] = term.item()
        weighted = term if weight == 1.0 else weight * term
        total = weighted if total is None else total + weighted
    assert total is not None
    return total
