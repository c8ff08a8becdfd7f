"""Classifier network (ReLU MLP backbone + linear head) and the bias adaptor.

Parameters live in a :class:`ParamSet`, a flat mapping from canonical names to
float64 arrays::

    backbone.<i>.W  (out, in)     backbone.<i>.b  (out,)
    head.W          (C, d)        head.b          (C,)
    cba.W1          (H, C)        cba.b1          (H,)
    cba.W2          (C, H)        cba.b2          (C,)

The forward functions accept any mapping whose values are arrays or
:class:`~cbalab.autodiff.Tensor` objects, which is how a differentiable head
copy gets substituted in during the bi-level step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEAD = ("head.W", "head.b")
CBA = ("cba.W1", "cba.b1", "cba.W2", "cba.b2")
CHECKPOINT_MAGIC = b"CBA1"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    class_count: int
    backbone_widths: tuple[int, ...] = (64,)
    cba_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        dims = (self.input_dim, self.class_count, self.cba_hidden, *self.backbone_widths)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all model dimensions must be >= 1, got {self}")
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))

    @property
    def feature_dim(self) -> int:
        return self.backbone_widths[-1] if self.backbone_widths else self.input_dim


class ParamSet(Mapping[str, np.ndarray]):
    """Named parameter arrays split into backbone, head and CBA groups."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        missing = [k for k in HEAD + CBA if k not in self._arrays]
        if missing:
            raise ValueError(f"ParamSet missing {missing}")
        self._check_shapes()

    def _check_shapes(self) -> None:
        depth = self.depth
        prev = None
        for i in range(depth):
            W, b = self[f"backbone.{i}.W"], self[f"backbone.{i}.b"]
            if W.ndim != 2 or b.shape != (W.shape[0],) or (prev is not None and W.shape[1] != prev):
                raise ValueError(f"backbone layer {i} does not chain: W{W.shape}, b{b.shape}")
            prev = W.shape[0]
        W, b = self["head.W"], self["head.b"]
        if b.shape != (W.shape[0],) or (prev is not None and W.shape[1] != prev):
            raise ValueError(f"head does not chain: W{W.shape}, b{b.shape}")
        C = W.shape[0]
        W1, b1, W2, b2 = (self[k] for k in CBA)
        if W1.shape[1] != C or W2.shape[0] != C or b2.shape != (C,) or b1.shape != (W1.shape[0],):
            raise ValueError(f"CBA must map {C} classes to {C} classes")
        if W2.shape[1] != W1.shape[0]:
            raise ValueError(f"CBA hidden widths disagree: {W1.shape} vs {W2.shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def __len__(self) -> int:
        return len(self._arrays)

    @property
    def depth(self) -> int:
        return sum(1 for k in self._arrays if k.startswith("backbone.") and k.endswith(".W"))

    @property
    def class_count(self) -> int:
        return self["head.W"].shape[0]

    @property
    def backbone_names(self) -> list[str]:
        return [f"backbone.{i}.{p}" for i in range(self.depth) for p in ("W", "b")]

    @property
    def theta_names(self) -> list[str]:
        return self.backbone_names + list(HEAD)

    @property
    def omega_names(self) -> list[str]:
        return list(CBA)

    @property
    def names(self) -> list[str]:
        """Canonical order: backbone layers, head, CBA."""
        return self.theta_names + self.omega_names

    def group(self, names) -> dict[str, np.ndarray]:
        return {k: self._arrays[k] for k in names}

    def classifier(self) -> dict[str, np.ndarray]:
        """The parameters used at test time (CBA excluded)."""
        return self.group(self.theta_names)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        merged = dict(self._arrays)
        for k, v in updates.items():
            if k not in merged:
                raise KeyError(k)
            merged[k] = np.asarray(v, dtype=np.float64)
        return ParamSet(merged)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})

    def tensors(self, names=None, tracked: bool = False) -> dict[str, Tensor]:
        names = self.names if names is None else names
        return {k: Tensor(self._arrays[k], tracked=tracked) for k in names}

    def equals(self, other: "ParamSet") -> bool:
        """Exact (bitwise on values) equality."""
        return self.names == other.names and all(
            np.array_equal(self[k], other[k]) for k in self.names
        )


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: ModelSpec) -> ParamSet:
    """Fan-in scaled uniform init; the CBA output layer starts at zero."""
    rng = np.random.default_rng(spec.seed)
    arrays: dict[str, np.ndarray] = {}
    fan_in = spec.input_dim
    for i, width in enumerate(spec.backbone_widths):
        arrays[f"backbone.{i}.W"] = _uniform(rng, fan_in, (width, fan_in))
        arrays[f"backbone.{i}.b"] = _uniform(rng, fan_in, (width,))
        fan_in = width
    C, H = spec.class_count, spec.cba_hidden
    arrays["head.W"] = _uniform(rng, fan_in, (C, fan_in))
    arrays["head.b"] = _uniform(rng, fan_in, (C,))
    arrays["cba.W1"] = _uniform(rng, C, (H, C))
    arrays["cba.b1"] = _uniform(rng, C, (H,))
    arrays["cba.W2"] = np.zeros((C, H))
    arrays["cba.b2"] = np.zeros(C)
    return ParamSet(arrays)


def _depth(params: Mapping) -> int:
    return sum(1 for k in params if k.startswith("backbone.") and k.endswith(".W"))


def _linear(x: Tensor, W, b) -> Tensor:
    W, b = ad.as_tensor(W), ad.as_tensor(b)
    if x.shape[1] != W.shape[1]:
        raise ValueError(f"input has {x.shape[1]} features but layer expects {W.shape[1]} (W{W.shape})")
    return ad.add(ad.matmul(x, ad.transpose(W)), b)


def _batch(X) -> Tensor:
    X = ad.as_tensor(X)
    if X.ndim != 2:
        raise ValueError(f"expected a (batch, features) matrix, got shape {X.shape}")
    return X


def backbone_forward(params: Mapping, X) -> Tensor:
    h = _batch(X)
    for i in range(_depth(params)):
        h = ad.relu(_linear(h, params[f"backbone.{i}.W"], params[f"backbone.{i}.b"]))
    return h


def head_forward(params: Mapping, features) -> Tensor:
    return _linear(_batch(features), params["head.W"], params["head.b"])


def classifier_forward(params: Mapping, X) -> Tensor:
    """Head logits of the plain classifier."""
    return head_forward(params, backbone_forward(params, X))


def cba_logits(params: Mapping, Z) -> Tensor:
    """Pre-softmax adaptor output: MLP(z) + z (skip connection)."""
    Z = _batch(Z)
    hidden = ad.relu(_linear(Z, params["cba.W1"], params["cba.b1"]))
    return ad.add(Z, _linear(hidden, params["cba.W2"], params["cba.b2"]))


def cba_forward(params: Mapping, Z) -> Tensor:
    """Adapted posterior softmax(W2 relu(W1 z + b1) + b2 + z), row-wise."""
    return ad.softmax(cba_logits(params, Z))


def argmax_lowest(Z: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    return np.argmax(Z, axis=1).astype(np.int64)


def predict(classifier: Mapping, X) -> np.ndarray:
    """Test-time labels from the plain classifier; CBA entries are never read."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    view = {k: classifier[k] for k in classifier if not k.startswith("cba.")}
    with ad.no_record():
        Z = classifier_forward(view, X).value
    return argmax_lowest(Z)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ParamSet, path) -> None:
    """Little-endian flat binary: magic, then (name, rank, dims, f64 values) per tensor."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in params.names:
            value = params[name]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamSet:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    pos = 4
    arrays = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return ParamSet(arrays)
