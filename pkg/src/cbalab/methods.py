"""Rehearsal losses (ER, DER++) and the plain SGD step they drive."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .buffer import Batch
from .nn import ParamSet, cba_logits, classifier_forward


class TrainingError(RuntimeError):
    """A step produced a non-finite loss or gradient."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class MethodConfig:
    method: str = "er"
    use_cba: bool = False
    alpha: float = 0.03
    beta: float = 0.3
    derpp_distill_weight: float = 0.5
    derpp_replay_weight: float = 0.5

    def __post_init__(self):
        if self.method not in ("er", "derpp"):
            raise ValueError(f"unknown method {self.method!r}; expected 'er' or 'derpp'")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.derpp_distill_weight < 0 or self.derpp_replay_weight < 0:
            raise ValueError("DER++ weights must be nonnegative")


@dataclass
class TrainBatch:
    new: Batch
    buf: Batch
    second_buf: Batch | None = None  # DER++ logit-replay draw

    def combined(self) -> tuple[np.ndarray, np.ndarray]:
        parts = [b for b in (self.new, self.buf) if len(b)]
        if not parts:
            raise ValueError("training batch is empty")
        return np.concatenate([b.x for b in parts]), np.concatenate([b.y for b in parts])


def _ce(params: Mapping, X, y, with_cba: bool) -> Tensor:
    # log P~[y] taken as log_softmax of the adapted logits: equal to log(softmax(.))
    # but stable, and bit-identical to the plain path when the adaptor outputs zero.
    Z = classifier_forward(params, X)
    if with_cba:
        Z = cba_logits(params, Z)
    return ad.mean(ad.nll(ad.log_softmax(Z), y))


def er_loss(params: Mapping, batch: TrainBatch, with_cba: bool = False) -> Tensor:
    """Mean cross-entropy over new and buffer examples together."""
    X, y = batch.combined()
    return _ce(params, X, y, with_cba)


def derpp_loss(
    params: Mapping,
    batch: TrainBatch,
    second_buf: Batch | None,
    with_cba: bool,
    cfg: MethodConfig,
) -> Tensor:
    """CE(new) + replay_weight * CE(buf) + distill_weight * MSE(logits, stored logits).

    The adaptor wraps only the cross-entropy terms; the distillation term
    compares raw head logits with the stored ones.
    """
    if len(batch.new) == 0:
        raise ValueError("DER++ needs a nonempty new batch")
    loss = _ce(params, batch.new.x, batch.new.y, with_cba)
    if len(batch.buf) and cfg.derpp_replay_weight:
        loss = loss + cfg.derpp_replay_weight * _ce(params, batch.buf.x, batch.buf.y, with_cba)
    if second_buf is not None and len(second_buf) and cfg.derpp_distill_weight:
        if second_buf.logits is None:
            raise ValueError("DER++ logit replay needs buffer entries with stored logits")
        Z = classifier_forward(params, second_buf.x)
        mse = ad.mean(ad.squared_error(Z, second_buf.logits))
        loss = loss + cfg.derpp_distill_weight * mse
    return loss


def rehearsal_loss(params: Mapping, batch: TrainBatch, cfg: MethodConfig, with_cba: bool) -> Tensor:
    if cfg.method == "derpp":
        return derpp_loss(params, batch, batch.second_buf, with_cba, cfg)
    return er_loss(params, batch, with_cba)


def sgd_update(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    return params.replace({k: params[k] - lr * g for k, g in grads.items()})


def _check_finite(value: float, grads: Mapping[str, np.ndarray], step: int | None) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}", step)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}", step)


def baseline_train_step(
    params: ParamSet,
    batch: TrainBatch,
    cfg: MethodConfig,
    step: int | None = None,
) -> tuple[ParamSet, float]:
    """One SGD step on the classifier parameters; CBA parameters are untouched.

    Returns the new parameters and the pre-step loss value.
    """
    with Tape():
        theta = params.tensors(params.theta_names, tracked=True)
        loss = rehearsal_loss(theta, batch, cfg, with_cba=False)
        grads = ad.grad_values(ad.backward(loss, theta))
    value = loss.item()
    _check_finite(value, grads, step)
    return sgd_update(params, grads, cfg.alpha), value
