"""Datasets, task splits and single-pass stream iteration."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .buffer import Batch

_HEADER = re.compile(r"^#cba-dataset,C=(\d+),d=(\d+)$")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0] or self.y.shape[0] == 0:
            raise ValueError(f"dataset needs n > 0 rows, got X{self.X.shape}, y{self.y.shape}")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])


@dataclass
class Task:
    train_X: np.ndarray
    train_y: np.ndarray
    train_index: np.ndarray  # row ids in the source dataset
    test_X: np.ndarray
    test_y: np.ndarray
    classes: tuple[int, ...]

    @property
    def test_set(self) -> tuple[np.ndarray, np.ndarray]:
        return self.test_X, self.test_y


@dataclass
class TaskStream:
    tasks: list[Task]
    class_count: int
    mode: str = "disjoint"
    epochs_per_task: int = 1

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def class_sets(self) -> list[tuple[int, ...]]:
        return [t.classes for t in self.tasks]

    @property
    def test_sets(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [t.test_set for t in self.tasks]


def _directions(C: int, d: int, rng: np.random.Generator) -> np.ndarray:
    if C <= d:
        return np.eye(d)[:C]
    # more classes than dimensions: spread random unit vectors
    U = rng.normal(size=(C, d))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def gen_gaussian_mixture(
    C: int = 10,
    d: int = 16,
    n_per_class: int = 500,
    separation: float = 6.0,
    spread: float = 1.5,
    seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian blobs centred at ``separation * u_c``.

    For C <= d the directions are the first C coordinate axes, so every pair
    of centres is the same distance apart.
    """
    if C < 2 or d < 2:
        raise ValueError(f"need C >= 2 and d >= 2, got C={C}, d={d}")
    rng = np.random.default_rng(seed)
    centers = separation * _directions(C, d, rng)
    y = np.repeat(np.arange(C), n_per_class)
    X = centers[y] + spread * rng.normal(size=(y.size, d))
    return Dataset(X, y, C, name="gaussian-mixture")


def split_disjoint(dataset: Dataset, T: int, test_fraction: float = 0.2, seed: int = 0) -> TaskStream:
    """Consecutive class groups of size C/T, each split into train and test."""
    C = dataset.class_count
    if T < 1 or C % T:
        hint = [t for t in range(1, C + 1) if C % t == 0]
        raise ValueError(f"{C} classes cannot be split evenly into {T} tasks; try one of {hint}")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    per = C // T
    tasks = []
    for t in range(T):
        classes = tuple(range(t * per, (t + 1) * per))
        train_rows, test_rows = [], []
        for c in classes:
            rows = rng.permutation(np.flatnonzero(dataset.y == c))
            n_test = int(round(test_fraction * rows.size))
            test_rows.append(rows[:n_test])
            train_rows.append(rows[n_test:])
        tr = np.sort(np.concatenate(train_rows))
        te = np.sort(np.concatenate(test_rows))
        tasks.append(Task(dataset.X[tr], dataset.y[tr], tr, dataset.X[te], dataset.y[te], classes))
    return TaskStream(tasks, C)


def _assign_destinations(origin: np.ndarray, quota: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random destination per moved example: task t receives exactly quota[t],
    and nothing returns to its own task."""
    slots = rng.permutation(np.repeat(np.arange(quota.size), quota))
    for p in np.flatnonzero(slots == origin):
        if slots[p] != origin[p]:
            continue
        ok = np.flatnonzero((slots != origin[p]) & (origin != slots[p]))
        if ok.size == 0:
            raise ValueError("cannot redistribute blurry examples without self-assignment")
        q = rng.choice(ok)
        slots[p], slots[q] = slots[q], slots[p]
    return slots


def split_blurry(
    dataset: Dataset,
    T: int,
    K: float,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> TaskStream:
    """Disjoint split, then move K% of each task's training examples to other tasks.

    Each task sends floor(K% of its size) examples out and receives exactly as
    many, so per-task sizes and the total are conserved and the share of
    foreign labels in any task is at most K%. Test sets stay class-pure.
    """
    if not 0 <= K < 100:
        raise ValueError(f"blurry K must be in [0, 100), got {K}")
    stream = split_disjoint(dataset, T, test_fraction, seed)
    if K == 0 or T == 1:
        return replace(stream, mode=f"blurry-{K:g}")
    rng = np.random.default_rng([seed, 1])
    sizes = np.array([t.train_y.size for t in stream.tasks])
    quota = np.floor(sizes * K / 100.0).astype(np.int64)
    # each task must be able to receive its quota from the others
    for _ in range(T):
        quota = np.minimum(quota, quota.sum() - quota)
    moved = [rng.choice(n, size=q, replace=False) for n, q in zip(sizes, quota)]
    origin = np.repeat(np.arange(T), quota)
    dest = _assign_destinations(origin, quota, rng)
    pool = np.concatenate(moved) if quota.sum() else np.zeros(0, dtype=np.int64)

    tasks = []
    for t, task in enumerate(stream.tasks):
        keep = np.setdiff1d(np.arange(sizes[t]), moved[t])
        incoming = np.flatnonzero(dest == t)
        X = [task.train_X[keep]]
        y = [task.train_y[keep]]
        idx = [task.train_index[keep]]
        for p in incoming:
            src = stream.tasks[origin[p]]
            row = pool[p]
            X.append(src.train_X[row:row + 1])
            y.append(src.train_y[row:row + 1])
            idx.append(src.train_index[row:row + 1])
        tasks.append(replace(task, train_X=np.concatenate(X), train_y=np.concatenate(y),
                             train_index=np.concatenate(idx)))
    return TaskStream(tasks, stream.class_count, mode=f"blurry-{K:g}",
                      epochs_per_task=stream.epochs_per_task)


def permute_task_order(stream: TaskStream, perm: Sequence[int]) -> TaskStream:
    """Reorder tasks so position k holds the old task ``perm[k]``."""
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(len(stream))):
        raise ValueError(f"{perm} is not a permutation of 0..{len(stream) - 1}")
    return replace(stream, tasks=[stream.tasks[p] for p in perm])


@dataclass
class StreamBatch:
    task: int
    epoch: int
    batch: Batch


def online_iterator(stream: TaskStream, batch_size: int, seed: int = 0) -> Iterator[StreamBatch]:
    """Tasks in order; within a task, one shuffled pass per epoch."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    for t, task in enumerate(stream.tasks):
        n = task.train_y.size
        for epoch in range(stream.epochs_per_task):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                rows = order[start:start + batch_size]
                yield StreamBatch(t, epoch, Batch(task.train_X[rows], task.train_y[rows],
                                                  index=task.train_index[rows]))


# ---------------------------------------------------------------------------
# file format


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#cba-dataset,C={dataset.class_count},d={dataset.dim}\n")
        for label, row in zip(dataset.y, dataset.X):
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def load_dataset(path) -> Dataset:
    """Parse ``#cba-dataset,C=<int>,d=<int>`` followed by ``label,f0,...`` rows."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError(f"{path}: empty file")
    m = _HEADER.match(lines[0].strip())
    if not m:
        raise ValueError(f"{path}:1: malformed header {lines[0]!r}")
    C, d = int(m.group(1)), int(m.group(2))
    X, y = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.strip().split(",")
        if len(fields) != d + 1:
            raise ValueError(f"{path}:{lineno}: expected {d + 1} fields, got {len(fields)}")
        try:
            label = int(fields[0])
            row = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        if not 0 <= label < C:
            raise ValueError(f"{path}:{lineno}: label {label} outside [0, {C})")
        X.append(row)
        y.append(label)
    if not y:
        raise ValueError(f"{path}: no examples")
    return Dataset(np.array(X, dtype=np.float64).reshape(len(y), d), np.array(y), C, name=path.stem)
