"""Bi-level training of the classifier (inner) and the bias adaptor (outer).

Each step takes one SGD step on every classifier parameter through the
adapted network, then moves the adaptor along the gradient of a fresh
buffer loss evaluated after that step. Only the linear head is unrolled for
the adaptor gradient: the head's one-step update stays on the tape as a
function of the adaptor parameters, while the backbone enters the outer loss
as a constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .buffer import Batch, MemoryBuffer, buffer_sample, reservoir_update
from .methods import MethodConfig, TrainBatch, TrainingError, baseline_train_step, rehearsal_loss
from .metrics import AlignmentRecord, gradient_alignment
from .nn import HEAD, ParamSet, backbone_forward, classifier_forward, head_forward

log = logging.getLogger(__name__)


@dataclass
class BilevelState:
    params: ParamSet
    alpha: float
    beta: float
    step: int = 0
    last_diag: AlignmentRecord | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be nonnegative")


@dataclass
class InnerResult:
    theta_next: dict[str, np.ndarray]
    head: dict[str, Tensor]  # one-step head, differentiable in omega
    omega: dict[str, Tensor]  # tracked adaptor leaves
    loss: float
    trn_grads: dict[str, np.ndarray]


@dataclass
class StepRecord:
    step: int
    inner_loss: float
    outer_loss: float = math.nan
    align_ip: float = math.nan
    trn_grad_sq: float = math.nan
    outer_skipped: bool = False


@dataclass
class StepRngs:
    """Independent generators for the two buffer draws and the reservoir."""

    inner: np.random.Generator
    outer: np.random.Generator
    reservoir: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "StepRngs":
        a, b, c = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))


def inner_loss(params: Mapping, trn: TrainBatch, cfg: MethodConfig) -> Tensor:
    """Rehearsal loss through the adapted network g_omega(f_theta(x))."""
    return rehearsal_loss(params, trn, cfg, with_cba=True)


def inner_update(state: BilevelState, trn: TrainBatch, cfg: MethodConfig) -> InnerResult:
    """One SGD step on theta, plus the omega-differentiable copy of the head.

    Must run inside an active :class:`Tape`, which the outer loss then shares.
    """
    if ad.current_tape() is None:
        raise RuntimeError("inner_update needs an active Tape")
    params = state.params
    theta = params.tensors(params.theta_names, tracked=True)
    omega = params.tensors(params.omega_names, tracked=True)
    loss = inner_loss({**theta, **omega}, trn, cfg)
    grads = ad.backward(loss, theta, build_graph=True)
    values = ad.grad_values(grads)
    value = loss.item()
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in values.values()):
        raise TrainingError("non-finite inner loss or gradient", state.step)
    alpha = state.alpha
    theta_next = {k: params[k] - alpha * values[k] for k in params.theta_names}
    head = {k: ad.sub(theta[k], ad.mul(grads[k], alpha)) for k in HEAD}
    return InnerResult(theta_next, head, omega, value, values)


def outer_loss(head: Mapping, backbone: Mapping, buf: Batch) -> Tensor:
    """Plain-classifier buffer cross-entropy with the unrolled head."""
    if len(buf) == 0:
        raise ValueError("outer loss needs a nonempty buffer batch")
    features = backbone_forward(backbone, buf.x)
    Z = head_forward(head, features)
    return ad.cross_entropy(Z, buf.y)


def _backbone(theta_next: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in theta_next.items() if k.startswith("backbone.")}


def hypergradient(state: BilevelState, trn: TrainBatch, buf2: Batch, cfg: MethodConfig) -> dict[str, np.ndarray]:
    """Gradient of the outer loss w.r.t. omega through the unrolled head."""
    with Tape():
        inner = inner_update(state, trn, cfg)
        loss = outer_loss(inner.head, _backbone(inner.theta_next), buf2)
        return ad.grad_values(ad.backward(loss, inner.omega))


def hypergradient_fd_oracle(
    state: BilevelState,
    trn: TrainBatch,
    buf2: Batch,
    cfg: MethodConfig,
    epsilon: float = 1e-5,
    freeze_backbone: bool = True,
) -> dict[str, np.ndarray]:
    """Central differences of omega -> outer loss after a fresh inner step.

    Each probe recomputes the first-order inner gradient at the perturbed
    omega and applies the SGD step explicitly. With ``freeze_backbone`` the
    backbone is held at its post-step value for the unperturbed omega, which
    isolates the head-only path; otherwise the backbone step follows omega too.
    """
    params = state.params
    alpha = state.alpha

    def step_theta(p: ParamSet) -> dict[str, np.ndarray]:
        with Tape():
            theta = p.tensors(p.theta_names, tracked=True)
            omega = p.tensors(p.omega_names)
            grads = ad.grad_values(ad.backward(inner_loss({**theta, **omega}, trn, cfg), theta))
        return {k: p[k] - alpha * grads[k] for k in p.theta_names}

    frozen = _backbone(step_theta(params))

    def evaluate(omega: dict[str, np.ndarray]) -> float:
        stepped = step_theta(params.replace(omega))
        backbone = frozen if freeze_backbone else _backbone(stepped)
        with ad.no_record():
            Z = head_forward({k: stepped[k] for k in HEAD}, backbone_forward(backbone, buf2.x))
            return ad.cross_entropy(Z, buf2.y).item()

    return ad.finite_difference_gradient(evaluate, params.group(params.omega_names), epsilon)


def outer_update(state: BilevelState, hypergrad: Mapping[str, np.ndarray]) -> tuple[BilevelState, bool]:
    """omega <- omega - beta * hypergrad. Returns (state, applied)."""
    if not all(np.all(np.isfinite(g)) for g in hypergrad.values()):
        log.warning("step %d: non-finite hypergradient, outer update skipped", state.step)
        return state, False
    params = state.params
    updated = params.replace({k: params[k] - state.beta * hypergrad[k] for k in params.omega_names})
    return replace(state, params=updated), True


def remember(buffer: MemoryBuffer, new: Batch, params: ParamSet, cfg: MethodConfig, rng) -> None:
    """Reservoir insertion; DER++ snapshots the current head logits."""
    if cfg.method == "derpp":
        with ad.no_record():
            logits = classifier_forward(params, new.x).value
        new = Batch(new.x, new.y, logits, new.index)
    reservoir_update(buffer, new, rng)


def draw_train_batch(new: Batch, buffer: MemoryBuffer, size: int, cfg: MethodConfig, rng) -> TrainBatch:
    dim = new.x.shape[1]
    buf = buffer_sample(buffer, size, rng, dim)
    second = buffer_sample(buffer, size, rng, dim) if cfg.method == "derpp" and len(buf) else None
    return TrainBatch(new, buf, second)


def cba_train_step(
    state: BilevelState,
    new: Batch,
    buffer: MemoryBuffer,
    rngs: StepRngs,
    cfg: MethodConfig,
    buffer_batch: int | None = None,
    diagnostics: bool = False,
) -> tuple[BilevelState, StepRecord]:
    """One iteration of the interleaved inner/outer loop on an incoming batch."""
    size = len(new) if buffer_batch is None else buffer_batch
    step = state.step + 1
    trn = draw_train_batch(new, buffer, size, cfg, rngs.inner)
    if len(trn.buf) == 0:
        params, value = baseline_train_step(state.params, trn, cfg, step)
        state = replace(state, params=params, step=step)
        remember(buffer, new, state.params, cfg, rngs.reservoir)
        return state, StepRecord(step, value, outer_skipped=True)

    before = state
    buf2 = buffer_sample(buffer, size, rngs.outer, new.x.shape[1])
    with Tape():
        inner = inner_update(state, trn, cfg)
        outer = outer_loss(inner.head, _backbone(inner.theta_next), buf2)
        hyper = ad.grad_values(ad.backward(outer, inner.omega))
    record = StepRecord(step, inner.loss, outer.item())
    if diagnostics:
        diag = gradient_alignment(before.params, trn, buf2, cfg)
        record.align_ip, record.trn_grad_sq = diag.inner_product, diag.trn_grad_sq
        diag.step = step
        before = replace(before, last_diag=diag)

    stepped = replace(before, params=before.params.replace(inner.theta_next), step=step)
    state, applied = outer_update(stepped, hyper)
    record.outer_skipped = not applied
    remember(buffer, new, state.params, cfg, rngs.reservoir)
    return state, record
