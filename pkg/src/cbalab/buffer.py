"""Reservoir-sampled rehearsal memory."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class BufferEntry:
    x: np.ndarray
    y: int
    logits: np.ndarray | None = None
    stream_index: int = 0


@dataclass
class Batch:
    """A minibatch of examples; ``logits`` only for buffer draws that stored them."""

    x: np.ndarray
    y: np.ndarray
    logits: np.ndarray | None = None
    index: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @classmethod
    def empty(cls, dim: int) -> "Batch":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))


@dataclass
class MemoryBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError(f"buffer capacity must be >= 0, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries


def reservoir_update(buffer: MemoryBuffer, batch: Batch, rng: np.random.Generator) -> MemoryBuffer:
    """Offer every example of ``batch`` to the reservoir, in order.

    The i-th example of the whole stream (1-based) is appended while the
    buffer has room and otherwise overwrites a uniform slot with probability
    M / i.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("reservoir_update needs a nonempty batch")
    index = batch.index if batch.index is not None else np.arange(buffer.seen, buffer.seen + n)
    M = buffer.capacity
    for k in range(n):
        buffer.seen += 1
        if M == 0:
            continue
        logits = None if batch.logits is None else np.array(batch.logits[k], dtype=np.float64)
        entry = BufferEntry(np.array(batch.x[k], dtype=np.float64), int(batch.y[k]), logits, int(index[k]))
        if len(buffer.entries) < M:
            buffer.entries.append(entry)
        else:
            j = int(rng.integers(0, buffer.seen))
            if j < M:
                buffer.entries[j] = entry
    return buffer


def buffer_sample(buffer: MemoryBuffer, size: int, rng: np.random.Generator, dim: int | None = None) -> Batch:
    """Uniform draw without replacement; the whole buffer if ``size`` exceeds it.

    An empty buffer yields an empty batch (check ``len(batch) == 0``); ``dim``
    sets its feature width.
    """
    if buffer.is_empty():
        return Batch.empty(dim if dim is not None else 0)
    k = min(size, len(buffer))
    picks = rng.choice(len(buffer), size=k, replace=False)
    chosen = [buffer.entries[i] for i in picks]
    logits = None
    if all(e.logits is not None for e in chosen):
        logits = np.stack([e.logits for e in chosen])
    return Batch(
        x=np.stack([e.x for e in chosen]),
        y=np.array([e.y for e in chosen], dtype=np.int64),
        logits=logits,
        index=np.array([e.stream_index for e in chosen], dtype=np.int64),
    )


def buffer_label_histogram(buffer: MemoryBuffer, class_count: int) -> np.ndarray:
    return np.bincount([e.y for e in buffer.entries], minlength=class_count)[:class_count]


def dump_buffer_csv(buffer: MemoryBuffer, path) -> None:
    """Debug dump: stream_index, y, x0..x{d-1} (stored logits omitted)."""
    dim = buffer.entries[0].x.shape[0] if buffer.entries else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stream_index", "y"] + [f"x{i}" for i in range(dim)])
        for e in buffer.entries:
            writer.writerow([e.stream_index, e.y] + [repr(float(v)) for v in e.x])
