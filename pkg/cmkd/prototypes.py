"""
Class prototypes, Dirichlet evidence and the uncertainty-alignment loss.

alpha[i, j] = exp(Q(e, Φ)[i, j] / τ) + 1, total evidence S_i = Σ_j alpha[i, j],
u_i = 1 - c / S_i (as printed) or c / S_i (inverse form).
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from cmkd import instrumentation
from cmkd.exceptions import DataError, ShapeError
from cmkd.losses import similarity_matrix
from cmkd.schemas import PrototypeSource, UncertaintyForm
from cmkd.tensor import (
    EPS,
    Tensor,
    clip_max,
    exp,
    gather_diagonal,
    mean,
    sum,
)

EXP_ARG_LIMIT = 60.0


@dataclass
class PrototypeBank:
    phi: Tensor  # [c, embed_dim]
    source: PrototypeSource

    @property
    def c(self) -> int:
        return self.phi.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.phi.shape[1]


def _validate_rows(phi: np.ndarray) -> None:
    if phi.ndim != 2 or phi.shape[0] < 2:
        raise ShapeError(f"a prototype bank needs >= 2 rows, got shape {phi.shape}")
    norms = np.linalg.norm(phi, axis=1)
    if np.any(norms <= EPS):
        raise DataError("degenerate prototype (norm at the stability floor)")


def init_prototypes(
    teacher_embeddings: Union[Tensor, np.ndarray], labels: np.ndarray, c: int
) -> PrototypeBank:
    """Row j is the L2-normalized mean teacher embedding of class/bin j."""
    emb = (
        teacher_embeddings.numpy()
        if isinstance(teacher_embeddings, Tensor)
        else np.asarray(teacher_embeddings, dtype=np.float64)
    )
    labels = np.asarray(labels, dtype=np.int64)
    if emb.ndim != 2 or labels.shape != (emb.shape[0],):
        raise ShapeError(f"embeddings {emb.shape} with labels {labels.shape}")
    if c < 2:
        raise DataError("need at least 2 prototypes")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DataError(f"labels must lie in [0, {c})")
    counts = np.bincount(labels, minlength=c)
    if np.any(counts == 0):
        empty = [j for j in range(c) if counts[j] == 0]
        raise DataError(f"cannot initialize prototypes: empty classes/bins {empty}")
    sums = np.zeros((c, emb.shape[1]))
    np.add.at(sums, labels, emb)
    means = sums / counts[:, None]
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    if np.any(norms <= EPS):
        raise DataError("a class mean embedding is at the stability floor")
    phi = means / norms
    _validate_rows(phi)
    return PrototypeBank(
        Tensor(phi, requires_grad=True, name="prototypes"),
        PrototypeSource.CLASS_MEAN_INIT,
    )


def random_prototypes(
    c: int, embed_dim: int, rng: np.random.Generator
) -> PrototypeBank:
    phi = rng.standard_normal((c, embed_dim))
    phi /= np.linalg.norm(phi, axis=1, keepdims=True)
    _validate_rows(phi)
    return PrototypeBank(
        Tensor(phi, requires_grad=True, name="prototypes"), PrototypeSource.LEARNED
    )


def bin_continuous_labels(
    y: np.ndarray, c: int, bounds: Optional[tuple[float, float]] = None
) -> np.ndarray:
    """Map continuous labels into c equal-width bins over [lo, hi]."""
    y = np.asarray(y, dtype=np.float64)
    lo, hi = bounds if bounds is not None else (float(y.min()), float(y.max()))
    if hi <= lo:
        return np.zeros(y.shape, dtype=np.int64)
    idx = np.floor((y - lo) / (hi - lo) * c).astype(np.int64)
    return np.clip(idx, 0, c - 1)


def dirichlet_alpha(e: Tensor, bank: PrototypeBank, beta: float, tau: float) -> Tensor:
    if e.ndim != 2 or e.shape[1] != bank.embed_dim:
        raise ShapeError(
            f"embeddings {e.shape} do not match prototypes {bank.phi.shape}"
        )
    instrumentation.count(instrumentation.PROTOTYPE)
    q = similarity_matrix(e, bank.phi, beta)
    return exp(clip_max(q / tau, EXP_ARG_LIMIT)) + 1.0


def uncertainty(
    alpha: Tensor, form: UncertaintyForm = UncertaintyForm.AS_PRINTED
) -> Tensor:
    if alpha.ndim != 2:
        raise ShapeError(f"alpha must be N×c, got {alpha.shape}")
    c = float(alpha.shape[1])
    ratio = c / sum(alpha, axis=1)
    if form is UncertaintyForm.INVERSE:
        return ratio
    return 1.0 - ratio


def loss_unc(u: Tensor, q_batch: Tensor, delta: float) -> Tensor:
    """Mean squared gap between u_j and δ·h_j, h_j the mean off-diagonal row of Q."""
    n = q_batch.shape[0]
    if q_batch.ndim != 2 or q_batch.shape[1] != n or u.shape != (n,):
        raise ShapeError(f"loss_unc: u {u.shape} with Q {q_batch.shape}")
    if n < 2:
        raise ShapeError("loss_unc needs a batch of at least 2")
    h = (sum(q_batch, axis=1) - gather_diagonal(q_batch)) / float(n - 1)
    gap = u - delta * h
    return mean(gap * gap)
