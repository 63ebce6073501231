"""
Finite-difference verification of the loss gradients.

Each check draws random instances, compares the tape gradient of every
differentiable input with central differences and reports the worst
norm-relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8).
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from cmkd.data import PairedBatch
from cmkd.losses import loss_ccc, loss_ce, loss_kd, loss_sim, similarity_matrix
from cmkd.models import build_model
from cmkd.prototypes import PrototypeBank, dirichlet_alpha, loss_unc, uncertainty
from cmkd.schemas import (
    Activation,
    ExtractorConfig,
    HeadConfig,
    LossConfig,
    LossWeights,
    PrototypeSource,
    Task,
    UncertaintyForm,
)
from cmkd.tensor import Tensor, backward, no_grad
from cmkd.training import student_objective

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
MIN_INSTANCES = 20
BATCH = 6

LossFn = Callable[[], Tensor]
Case = tuple[LossFn, list[Tensor]]
CaseBuilder = Callable[[np.random.Generator, int], Case]


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_error: float
    instances: int


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def numeric_gradient(fn: LossFn, param: Tensor, step: float = STEP) -> np.ndarray:
    base = param.numpy()
    grad = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[idx] = base[idx] + step
            param.assign_(shifted)
            upper = fn().item()
            shifted[idx] = base[idx] - step
            param.assign_(shifted)
            lower = fn().item()
            grad[idx] = (upper - lower) / (2.0 * step)
    param.assign_(base)
    return grad


def analytic_gradient(fn: LossFn, params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    backward(fn())
    return [np.zeros(p.shape) if p.grad is None else p.grad for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


# Cases


def _sim_case(rng: np.random.Generator, i: int) -> Case:
    e_s, e_t = _leaf(rng, BATCH, 4), _leaf(rng, BATCH, 4)
    beta = float(rng.uniform(0.5, 5.0))
    return (lambda: loss_sim(e_s, e_t, beta)), [e_s, e_t]


def _unc_case(rng: np.random.Generator, i: int) -> Case:
    e, e_t, phi = _leaf(rng, BATCH, 4), _leaf(rng, BATCH, 4), _leaf(rng, 3, 4)
    bank = PrototypeBank(phi, PrototypeSource.LEARNED)
    beta, tau = float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.5, 2.0))
    delta = float(rng.uniform(0.1, 1.0))
    form = UncertaintyForm.AS_PRINTED if i % 2 == 0 else UncertaintyForm.INVERSE

    def fn() -> Tensor:
        u = uncertainty(dirichlet_alpha(e, bank, beta, tau), form)
        return loss_unc(u, similarity_matrix(e, e_t, beta), delta)

    return fn, [e, e_t, phi]


def _kd_case(rng: np.random.Generator, i: int) -> Case:
    """Every instance checks both forms: DEC (T = 1 or 2) and CER."""
    dec_t, dec_s = Tensor(rng.standard_normal((BATCH, 3))), _leaf(rng, BATCH, 3)
    cer_t, cer_s = Tensor(rng.standard_normal((BATCH, 1))), _leaf(rng, BATCH, 1)
    temperature = 1.0 if i % 2 == 0 else 2.0

    def fn() -> Tensor:
        dec = loss_kd(dec_t, dec_s, Task.DEC, temperature)
        return dec + loss_kd(cer_t, cer_s, Task.CER)

    return fn, [dec_s, cer_s]


def _ce_case(rng: np.random.Generator, i: int) -> Case:
    logits = _leaf(rng, BATCH, 4, scale=2.0)
    y = rng.integers(0, 4, size=BATCH)
    return (lambda: loss_ce(logits, y)), [logits]


def _ccc_case(rng: np.random.Generator, i: int) -> Case:
    pred = _leaf(rng, BATCH)
    y = rng.standard_normal(BATCH)
    return (lambda: loss_ccc(pred, y)), [pred]


def _total_case(rng: np.random.Generator, i: int) -> Case:
    """Full objective through both extractors, the prototypes and the injection."""
    task = Task.DEC if i % 2 == 0 else Task.CER
    out = 3 if task is Task.DEC else 1
    tanh = Activation.TANH
    dims = {"hidden_dims": [4], "feature_dim": 4, "embed_dim": 3, "activation": tanh}
    student = build_model(
        ExtractorConfig(input_dim=3, **dims),
        HeadConfig(layer_dims=[3, out], output_dim=out, activation=tanh),
        rng,
    )
    teacher_head = HeadConfig(
        layer_dims=[4, out], injection_layer=1, output_dim=out, activation=tanh
    )
    teacher = build_model(
        ExtractorConfig(input_dim=5, **dims), teacher_head, rng, role="teacher"
    ).freeze()
    bank = PrototypeBank(_leaf(rng, 3, 3), PrototypeSource.LEARNED)
    y = (
        rng.integers(0, out, size=BATCH)
        if task is Task.DEC
        else rng.standard_normal(BATCH)
    )
    batch = PairedBatch(
        x_s=Tensor(rng.standard_normal((BATCH, 3))),
        x_t=Tensor(rng.standard_normal((BATCH, 5))),
        y=y,
        trial_ids=np.zeros(BATCH, dtype=np.int64),
        task=task,
    )
    w = rng.uniform(0.1, 2.0, size=4)
    config = LossConfig(
        beta=float(rng.uniform(1.0, 5.0)),
        weights=LossWeights(sim=w[0], unc=w[1], kd=w[2], task=w[3]),
    )

    def fn() -> Tensor:
        return student_objective(student, teacher, bank, batch, config)

    return fn, student.parameters() + [bank.phi]


CHECKS: dict[str, CaseBuilder] = {
    "loss_sim": _sim_case,
    "loss_unc": _unc_case,
    "loss_kd": _kd_case,
    "loss_ce": _ce_case,
    "loss_ccc": _ccc_case,
    "loss_total": _total_case,
}


def check(
    name: str,
    instances: int = MIN_INSTANCES,
    seed: int = 0,
    tolerance: float = TOLERANCE,
    corrupt: bool = False,
) -> CheckResult:
    """`corrupt` perturbs the analytic gradient; the check must then fail."""
    build = CHECKS[name]
    rng = np.random.default_rng([seed, list(CHECKS).index(name)])
    worst = 0.0
    for i in range(instances):
        fn, params = build(rng, i)
        grads = analytic_gradient(fn, params)
        if corrupt:
            grads = [g * 1.01 + 1e-3 for g in grads]
        for p, g in zip(params, grads):
            worst = max(worst, relative_error(g, numeric_gradient(fn, p)))
    result = CheckResult(name, worst <= tolerance, worst, instances)
    logger.debug("gradcheck %s: max relative error %.3e", name, worst)
    return result


def run_gradcheck(
    instances: int = MIN_INSTANCES,
    seed: int = 0,
    corrupt: Optional[str] = None,
) -> list[CheckResult]:
    return [
        check(name, instances, seed, corrupt=(name == corrupt)) for name in CHECKS
    ]
