"""Frame-wise gates: mean pooling, excitation, aggregation and their composition.

A gate squeezes each frame to a scalar statistic (its channel mean), runs
the N statistics through a two-layer bottleneck MLP, and emits one weight
per frame. A sigmoid head gives independent weights used to rescale frames
(excitation); a softmax head gives simplex weights used for a weighted sum
(aggregation).

All functions accept batched features of shape ``(..., N, C)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import numkernel as nk
from .numkernel import Node

SIGMOID = "sigmoid"
SOFTMAX = "softmax"
SQUEEZE = "squeeze"
EXPANSION = "expansion"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class GateParadigm:
    kind: str = SQUEEZE
    ratio: int = 4

    def __post_init__(self):
        if self.kind not in (SQUEEZE, EXPANSION):
            raise ConfigurationError(f"unknown paradigm {self.kind!r}")
        if int(self.ratio) != self.ratio or self.ratio <= 0:
            raise ConfigurationError(f"ratio must be a positive integer, got {self.ratio!r}")

    def hidden_width(self, n_frames: int) -> int:
        if self.kind == SQUEEZE:
            return max(1, math.ceil(n_frames / self.ratio))
        return n_frames * self.ratio


@dataclass
class FrameFeatures:
    """Per-frame embeddings ``(..., N, C)`` with a validity mask ``(..., N)``.

    ``features`` may be an array or a :class:`Node`; padded rows must be zero.
    """

    features: object
    mask: np.ndarray | None = None

    def __post_init__(self):
        value = self.features.value if isinstance(self.features, Node) else self.features
        if not isinstance(self.features, Node):
            self.features = np.asarray(self.features, dtype=np.float64)
            value = self.features
        if value.ndim < 2:
            raise nk.DimensionError(f"frame features need shape (..., N, C), got {value.shape}")
        if self.mask is None:
            self.mask = np.ones(value.shape[:-1], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != value.shape[:-1]:
            raise nk.DimensionError(f"mask shape {self.mask.shape} does not match features {value.shape}")
        if not self.mask.any(axis=-1).all():
            raise ValueError("every video needs at least one valid frame")
        if not np.isfinite(value).all():
            raise ValueError("frame features contain non-finite values")
        if np.any(value[~self.mask] != 0):
            raise ValueError("padded frame rows must be all-zero")

    @property
    def node(self) -> Node:
        return nk.as_node(self.features)

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def n_frames(self) -> int:
        return self.mask.shape[-1]

    @property
    def channels(self) -> int:
        return self.value.shape[-1]


@dataclass
class GateParams:
    w_in: object
    b_in: object
    w_out: object
    b_out: object
    paradigm: GateParadigm
    head: str

    FIELDS = ("w_in", "b_in", "w_out", "b_out")

    def __post_init__(self):
        if self.head not in (SIGMOID, SOFTMAX):
            raise ConfigurationError(f"unknown gate head {self.head!r}")
        n = self.n_frames
        h = self.paradigm.hidden_width(n)
        expected = {"w_in": (h, n), "b_in": (h,), "w_out": (n, h), "b_out": (n,)}
        for name, shape in expected.items():
            got = nk.as_node(getattr(self, name)).shape
            if got != shape:
                raise nk.DimensionError(f"{name} has shape {got}, paradigm needs {shape}")

    @property
    def n_frames(self) -> int:
        return nk.as_node(self.w_in).shape[1]

    @property
    def hidden_width(self) -> int:
        return nk.as_node(self.w_in).shape[0]

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: np.array(nk.as_node(getattr(self, k)).value) for k in self.FIELDS}

    def bind(self, tensors: Mapping[str, Node], prefix: str = "") -> "GateParams":
        """Copy whose weights are looked up as ``tensors[prefix + field]``."""
        return replace(self, **{k: tensors[prefix + k] for k in self.FIELDS})


def init_gate(n_frames: int, paradigm: GateParadigm, head: str, mode: str = "zero", rng=None) -> GateParams:
    """Zero weights, or uniform in ``±1/sqrt(fan_in)`` drawn from ``rng`` (a seed or Generator)."""
    if n_frames < 1:
        raise ConfigurationError("a gate needs at least one frame")
    h = paradigm.hidden_width(n_frames)
    if mode == "zero":
        arrays = [np.zeros((h, n_frames)), np.zeros(h), np.zeros((n_frames, h)), np.zeros(n_frames)]
    elif mode == "uniform":
        rng = np.random.default_rng(rng)
        b1, b2 = 1 / math.sqrt(n_frames), 1 / math.sqrt(h)
        arrays = [
            rng.uniform(-b1, b1, (h, n_frames)),
            rng.uniform(-b1, b1, h),
            rng.uniform(-b2, b2, (n_frames, h)),
            rng.uniform(-b2, b2, n_frames),
        ]
    else:
        raise ConfigurationError(f"unknown init mode {mode!r}")
    return GateParams(*arrays, paradigm=paradigm, head=head)


def _require_head(g: GateParams, head: str, op: str):
    if g.head != head:
        raise ConfigurationError(f"{op} needs a {head} gate, got {g.head}")


def frame_stats(v: FrameFeatures) -> Node:
    """Channel mean of every frame; padded frames give 0."""
    return nk.mean(nk.mul(v.node, v.mask[..., None]), axis=-1)


def gate_forward(u, g: GateParams, mask: np.ndarray | None = None) -> Node:
    u = nk.as_node(u)
    if u.shape[-1] != g.n_frames:
        raise nk.DimensionError(f"statistics of length {u.shape[-1]} fed to a gate built for N={g.n_frames}")
    hidden = nk.relu(nk.affine(u, g.w_in, g.b_in))
    logits = nk.affine(hidden, g.w_out, g.b_out)
    if g.head == SOFTMAX:
        return nk.softmax(logits, axis=-1, mask=mask)
    z = nk.sigmoid(logits)
    return z if mask is None else nk.mul(z, mask)


def gate_weights(v: FrameFeatures, g: GateParams) -> Node:
    return gate_forward(frame_stats(v), g, v.mask)


def _scale_rows(x: Node, w: Node) -> Node:
    return nk.mul(x, nk.reshape(w, w.shape + (1,)))


def excitation(v: FrameFeatures, g: GateParams) -> FrameFeatures:
    _require_head(g, SIGMOID, "excitation")
    return FrameFeatures(_scale_rows(v.node, gate_weights(v, g)), v.mask)


def aggregation(v: FrameFeatures, g: GateParams) -> Node:
    _require_head(g, SOFTMAX, "aggregation")
    return nk.sum(_scale_rows(v.node, gate_weights(v, g)), axis=-2)


def excitation_and_aggregation(v: FrameFeatures, g_excite: GateParams, g_aggregate: GateParams) -> Node:
    # the aggregation gate recomputes its statistics from the excited frames
    return aggregation(excitation(v, g_excite), g_aggregate)


def mean_pool(v: FrameFeatures) -> Node:
    counts = v.mask.sum(axis=-1, keepdims=True).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("mean pooling over an empty mask")
    total = nk.sum(nk.mul(v.node, v.mask[..., None]), axis=-2)
    return nk.mul(total, 1.0 / counts)
