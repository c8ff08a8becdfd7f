"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive pairs a numpy forward with a vector-Jacobian product written
in terms of other primitives, so a backward pass run with ``build_graph=True``
records its own nodes and can itself be differentiated.

Typical use::

    with Tape():
        w = Tensor(w0, tracked=True)
        loss = mean(nll(log_softmax(x @ w.T), y))
        grads = backward(loss, {"w": w})
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

# Smallest argument passed to log; log(exp(-700)) stays finite in float64.
LOG_FLOOR = math.exp(-700.0)

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "_active_tape", default=None
)
_recording: contextvars.ContextVar[bool] = contextvars.ContextVar("_recording", default=True)


class Tensor:
    """A float64 array, optionally participating in the active tape."""

    __slots__ = ("value", "tracked", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, tracked: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.tracked = tracked
        self._node: tuple[Tape, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value.copy())

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


TensorLike = Tensor | np.ndarray | float | int


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    parents: tuple[Tensor, ...]
    out: Tensor
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]
    saved: np.ndarray = field(repr=False, default=None)


class Tape:
    """Append-only record of tracked operations for one training step.

    Use as a context manager; operations on tracked tensors are only legal
    while a tape is active. Nodes only ever point at earlier nodes, so the
    tape order is a topological order of the graph.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, parents, out, forward, vjp) -> None:
        idx = len(self.nodes)
        self.nodes.append(Node(op, parents, out, forward, vjp, saved=out.value))
        out._node = (self, idx)

    def parent_ids(self, idx: int) -> list[int | None]:
        """Node ids of a node's parents (None for leaves)."""
        ids = []
        for p in self.nodes[idx].parents:
            ids.append(p._node[1] if p._node is not None and p._node[0] is self else None)
        return ids

    def replay(self) -> bool:
        """Recompute every node from its parents and compare bit-for-bit."""
        for node in self.nodes:
            value = node.forward(*(p.value for p in node.parents))
            if value.shape != node.saved.shape or not np.array_equal(
                value.view(np.uint64), node.saved.view(np.uint64)
            ):
                return False
        return True


def current_tape() -> Tape | None:
    return _active_tape.get()


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Run operations without recording, even on tracked inputs."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def _apply(op: str, forward, vjp, *parents: Tensor) -> Tensor:
    out = Tensor(forward(*(p.value for p in parents)))
    if _recording.get() and any(p.tracked for p in parents):
        tape = _active_tape.get()
        if tape is None:
            raise RuntimeError(f"{op}: tracked operand used outside an active Tape")
        out.tracked = True
        tape.record(op, parents, out, forward, vjp)
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    in_shape = a.shape
    return _apply(
        "reshape",
        lambda x: x.reshape(shape),
        lambda g, out, x: (reshape(g, in_shape),),
        a,
    )


def broadcast_to(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    in_shape = a.shape
    return _apply(
        "broadcast_to",
        lambda x: np.broadcast_to(x, shape).copy(),
        lambda g, out, x: (sum_to(g, in_shape),),
        a,
    )


def _sum_to_value(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def sum_to(a: TensorLike, shape: Sequence[int]) -> Tensor:
    """Sum a broadcast tensor back down to ``shape`` (adjoint of broadcast_to)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _apply(
        "sum_to",
        lambda x: _sum_to_value(x, shape),
        lambda g, out, x: (broadcast_to(g, in_shape),),
        a,
    )


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.value, b.value)
    sa, sb = a.shape, b.shape
    return _apply(
        "add",
        np.add,
        lambda g, out, x, y: (sum_to(g, sa), sum_to(g, sb)),
        a,
        b,
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.value, b.value)
    sa, sb = a.shape, b.shape
    return _apply(
        "sub",
        np.subtract,
        lambda g, out, x, y: (sum_to(g, sa), neg(sum_to(g, sb))),
        a,
        b,
    )


def neg(a: TensorLike) -> Tensor:
    return _apply("neg", np.negative, lambda g, out, x: (neg(g),), as_tensor(a))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.value, b.value)
    sa, sb = a.shape, b.shape
    return _apply(
        "mul",
        np.multiply,
        lambda g, out, x, y: (sum_to(mul(g, y), sa), sum_to(mul(g, x), sb)),
        a,
        b,
    )


def reciprocal(a: TensorLike) -> Tensor:
    return _apply(
        "reciprocal",
        np.reciprocal,
        lambda g, out, x: (neg(mul(g, mul(out, out))),),
        as_tensor(a),
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _apply(
        "matmul",
        np.matmul,
        lambda g, out, x, y: (matmul(g, transpose(y)), matmul(transpose(x), g)),
        a,
        b,
    )


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    return _apply("transpose", lambda x: x.T.copy(), lambda g, out, x: (transpose(g),), a)


def relu(a: TensorLike) -> Tensor:
    # The mask is a constant: relu'' is zero almost everywhere.
    return _apply(
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda g, out, x: (mul(g, Tensor((x.value > 0).astype(np.float64))),),
        as_tensor(a),
    )


def exp(a: TensorLike) -> Tensor:
    return _apply("exp", np.exp, lambda g, out, x: (mul(g, out),), as_tensor(a))


def clamp_min(a: TensorLike, floor: float) -> Tensor:
    return _apply(
        "clamp_min",
        lambda x: np.maximum(x, floor),
        lambda g, out, x: (mul(g, Tensor((x.value >= floor).astype(np.float64))),),
        as_tensor(a),
    )


def log(a: TensorLike) -> Tensor:
    """Natural log with the argument clamped at ``LOG_FLOOR``."""
    clamped = clamp_min(a, LOG_FLOOR)
    return _apply("log", np.log, lambda g, out, x: (mul(g, reciprocal(x)),), clamped)


def sum(a: TensorLike, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    in_shape = a.shape
    if axis is None:
        kept = (1,) * a.ndim
    else:
        kept = tuple(1 if i == axis % a.ndim else n for i, n in enumerate(in_shape))

    def vjp(g, out, x):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, a)


def mean(a: TensorLike, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    if n == 0:
        raise ValueError("mean: empty tensor")
    return mul(sum(a, axis=axis), 1.0 / n)


def _rowwise(op: str, x: Tensor) -> None:
    if x.ndim != 2:
        raise ValueError(f"{op}: expected a (batch, classes) matrix, got shape {x.shape}")


def _softmax_value(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_value(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(a: TensorLike) -> Tensor:
    """Row-wise softmax with max subtraction."""
    a = as_tensor(a)
    _rowwise("softmax", a)

    def vjp(g, out, x):
        return (mul(out, sub(g, sum(mul(g, out), axis=1, keepdims=True))),)

    return _apply("softmax", _softmax_value, vjp, a)


def log_softmax(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    _rowwise("log_softmax", a)

    def vjp(g, out, x):
        return (sub(g, mul(exp(out), sum(g, axis=1, keepdims=True))),)

    return _apply("log_softmax", _log_softmax_value, vjp, a)


def nll(logp: TensorLike, labels) -> Tensor:
    """Per-row negative log-likelihood ``-logp[i, labels[i]]``."""
    logp = as_tensor(logp)
    _rowwise("nll", logp)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logp.shape
    if y.shape[0] != n:
        raise ValueError(f"nll: {n} rows but {y.shape[0]} labels")
    bad = np.flatnonzero((y < 0) | (y >= c))
    if bad.size:
        raise ValueError(f"nll: label {int(y[bad[0]])} at row {int(bad[0])} outside [0, {c})")
    rows = np.arange(n)
    onehot = np.zeros((n, c))
    onehot[rows, y] = 1.0

    def vjp(g, out, x):
        return (neg(mul(reshape(g, (n, 1)), Tensor(onehot))),)

    return _apply("nll", lambda x: -x[rows, y], vjp, logp)


def squared_error(a: TensorLike, b: TensorLike) -> Tensor:
    d = sub(a, b)
    return mul(d, d)


def cross_entropy(logits: TensorLike, labels) -> Tensor:
    """Mean softmax cross-entropy over rows."""
    return mean(nll(log_softmax(logits), labels))


def vdot(a: TensorLike, b: TensorLike) -> Tensor:
    return sum(mul(a, b))


# ---------------------------------------------------------------------------
# differentiation


GradMap = dict[str, Tensor]


def backward(loss: Tensor, wrt: Mapping[str, Tensor], build_graph: bool = False) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    With ``build_graph`` the returned gradients are tracked tensors on the
    loss's tape and can be differentiated again. Parameters the loss does not
    depend on receive zero gradients.
    """
    if loss.value.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, Tensor] = {}
    if loss._node is not None:
        tape, start = loss._node
        grads[id(loss)] = Tensor(np.ones_like(loss.value))
        ctx = contextlib.nullcontext() if build_graph else no_record()
        with ctx:
            for idx in range(start, -1, -1):
                node = tape.nodes[idx]
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                parent_grads = node.vjp(g, node.out, *node.parents)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or not p.tracked:
                        continue
                    prev = grads.get(id(p))
                    grads[id(p)] = pg if prev is None else add(prev, pg)
    out: GradMap = {}
    for name, t in wrt.items():
        g = grads.get(id(t))
        out[name] = g if g is not None else Tensor(np.zeros_like(t.value))
    return out


def finite_difference_gradient(
    eval_fn: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``eval_fn`` at ``params``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, value in base.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(eval_fn(base))
            flat[i] = orig - epsilon
            fm = float(eval_fn(base))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                coord = np.unravel_index(i, value.shape)
                raise ValueError(f"non-finite evaluation at {name}{list(coord)}")
            gflat[i] = (fp - fm) / (2.0 * epsilon)
        grads[name] = g
    return grads


def relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Max absolute difference scaled by the larger max magnitude of the two maps."""
    def peak(x) -> float:
        return float(np.max(np.abs(np.asarray(x)), initial=0.0))

    diff = max((peak(np.asarray(a[k]) - np.asarray(b[k])) for k in b), default=0.0)
    scale = max([peak(v) for v in a.values()] + [peak(v) for v in b.values()] + [0.0])
    if scale == 0.0:
        return diff
    return diff / scale


def grad_values(grads: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.value for k, v in grads.items()}
