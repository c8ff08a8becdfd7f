"""Continual-learning metrics and diagnostics.

Accuracies are percentages. ``a[i, j]`` is the accuracy on task ``i``'s test
set after training through task ``j``; entries with ``i > j`` are NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .methods import rehearsal_loss
from .nn import classifier_forward, predict


@dataclass
class AlignmentRecord:
    step: int
    inner_product: float
    trn_grad_sq: float


def new_accuracy_matrix(T: int) -> np.ndarray:
    return np.full((T, T), np.nan)


def accuracy(classifier: Mapping, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("accuracy of an empty test set is undefined")
    return 100.0 * float(np.mean(predict(classifier, X) == y))


def evaluate_model(classifier: Mapping, test_sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Per-task accuracy over the full class range (no task identity at test)."""
    return np.array([accuracy(classifier, X, y) for X, y in test_sets])


def _final_column(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ValueError(f"accuracy matrix must be square and nonempty, got shape {a.shape}")
    final = a[:, -1]
    if np.isnan(final).any():
        raise ValueError("accuracy matrix has unset entries in its final column")
    return final


def compute_ACC(a: np.ndarray) -> float:
    """Mean final accuracy over all tasks."""
    return float(np.mean(_final_column(a)))


def compute_FM(a: np.ndarray) -> float:
    """Mean drop from each task's best accuracy (after it was learned) to its final one."""
    final = _final_column(a)
    a = np.asarray(a, dtype=np.float64)
    T = a.shape[0]
    drops = []
    for t in range(T):
        seen = a[t, t:]
        if np.isnan(seen).any():
            raise ValueError(f"accuracy matrix row {t} has unset entries at or after column {t}")
        drops.append(float(seen.max()) - float(final[t]))
    # summed in task order, as written, so hand-computed values agree to the last bit
    return sum(drops) / T


def compute_ACC_AUC(steps: Sequence[int], accs: Sequence[float], interval: int) -> tuple[float, float]:
    """Area under the running-accuracy curve: (raw Riemann sum, per-step normalized)."""
    steps = np.asarray(steps)
    accs = np.asarray(accs, dtype=np.float64)
    if steps.size == 0 or steps.size != accs.size:
        raise ValueError("accuracy trace must be nonempty with one accuracy per step")
    if interval < 1:
        raise ValueError(f"interval must be >= 1, got {interval}")
    if steps.size > 1 and not np.all(np.diff(steps) == interval):
        raise ValueError(f"trace steps are not evenly spaced by {interval}")
    raw = sum(float(a) * interval for a in accs)
    return raw, raw / (steps.size * interval)


def confusion_and_task_distribution(
    classifier: Mapping,
    test_sets: Sequence[tuple[np.ndarray, np.ndarray]],
    class_sets: Sequence[Sequence[int]],
    class_count: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized confusion matrix and the share of predictions landing in each task.

    Rows for classes absent from the test data are left at zero.
    """
    X = np.concatenate([X for X, _ in test_sets])
    y = np.concatenate([y for _, y in test_sets])
    pred = predict(classifier, X)
    counts = np.zeros((class_count, class_count))
    np.add.at(counts, (y, pred), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    confusion = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    owner = np.full(class_count, -1)
    for t, classes in enumerate(class_sets):
        owner[list(classes)] = t
    mass = np.bincount(owner[pred], minlength=len(class_sets)).astype(np.float64)
    return confusion, mass / mass.sum()


def _flat(grads: Mapping[str, np.ndarray], names) -> np.ndarray:
    return np.concatenate([np.ravel(grads[k]) for k in names])


def gradient_alignment(params, trn, buf, cfg, loss_scale: float = 1.0) -> AlignmentRecord:
    """Inner product of the buffer-loss gradient (plain classifier) with the
    training-loss gradient (adapted classifier), both w.r.t. theta."""
    if len(buf) == 0:
        raise ValueError("alignment needs a nonempty buffer batch")
    names = params.theta_names
    with Tape():
        theta = params.tensors(names, tracked=True)
        omega = params.tensors(params.omega_names)
        trn_loss = ad.mul(rehearsal_loss({**theta, **omega}, trn, cfg, with_cba=True), loss_scale)
        g_trn = _flat(ad.grad_values(ad.backward(trn_loss, theta)), names)
    with Tape():
        theta = params.tensors(names, tracked=True)
        buf_loss = ad.cross_entropy(classifier_forward(theta, buf.x), buf.y)
        g_buf = _flat(ad.grad_values(ad.backward(buf_loss, theta)), names)
    return AlignmentRecord(step=0, inner_product=float(g_buf @ g_trn), trn_grad_sq=float(g_trn @ g_trn))
