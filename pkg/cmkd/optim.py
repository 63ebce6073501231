import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from cmkd.exceptions import ConfigError
from cmkd.schemas import LrSchedule
from cmkd.tensor import Tensor

STEP_SCHEDULE_DROPS = 3


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction; parameters without a gradient are skipped."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        frozen = [p.name for p in params if not p.requires_grad]
        if frozen:
            raise ConfigError(f"cannot optimize frozen parameters {frozen}")
        self.params = list(params)
        self.lr = lr
        self.state = OptimizerState(
            m=[np.zeros(p.shape) for p in self.params],
            v=[np.zeros(p.shape) for p in self.params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        st = self.state
        st.step += 1
        correction1 = 1.0 - st.beta1**st.step
        correction2 = 1.0 - st.beta2**st.step
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g
            st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g
            m_hat = st.m[i] / correction1
            v_hat = st.v[i] / correction2
            p.assign_(p.data - lr * m_hat / (np.sqrt(v_hat) + st.eps))


def learning_rate(
    epoch: int,
    epochs: int,
    lr_start: float,
    lr_end: float,
    schedule: LrSchedule = LrSchedule.COSINE,
) -> float:
    """LR for `epoch` in [0, epochs]; exactly lr_start at 0 and lr_end at epochs."""
    if epoch <= 0:
        return lr_start
    if epoch >= epochs:
        return lr_end
    frac = epoch / epochs
    if schedule is LrSchedule.COSINE:
        return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * frac))
    if schedule is LrSchedule.EXPONENTIAL:
        return lr_start * (lr_end / lr_start) ** frac
    drops = math.floor(frac * STEP_SCHEDULE_DROPS) / STEP_SCHEDULE_DROPS
    return lr_start * (lr_end / lr_start) ** drops


@dataclass
class EarlyStopState:
    patience: int
    mode: str = "min"
    best_score: float = math.inf
    best_epoch: int = -1
    best_checkpoint: Any = None
    epochs_since_improvement: int = 0
    history: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.mode not in ("min", "max"):
            raise ConfigError(f"unknown early-stopping mode {self.mode!r}")
        if self.mode == "max":
            self.best_score = -math.inf

    def improved(self, score: float) -> bool:
        if self.mode == "min":
            return score < self.best_score
        return score > self.best_score

    def update(self, epoch: int, score: float, checkpoint: Any = None) -> bool:
        """Record one epoch; returns True once training should stop."""
        self.history.append(score)
        if self.improved(score):
            self.best_score = score
            self.best_epoch = epoch
            self.best_checkpoint = checkpoint
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience
