"""Temporal encoders (LSTM, pre-norm Transformer) and the cross-modal scorer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import gates
from . import numkernel as nk
from .gates import FrameFeatures, GateParams
from .numkernel import Node

HEADS = ("meanP", "aggregation", "excitation+meanP", "excitation+aggregation")


def _bind(tensors: dict, nodes: Mapping[str, Node], prefix: str) -> dict:
    return {k: nodes[prefix + k] for k in tensors}


def _arrays(tensors: dict, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: np.array(nk.as_node(v).value) for k, v in tensors.items()}


def _uniform(rng, shape, fan_in):
    bound = 1 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


# ----------------------------------------------------------------------- LSTM


@dataclass
class LstmParams:
    """Stacked LSTM; per layer ``w_ih``/``w_hh`` are ``4C x C`` with gate rows ordered i, f, g, o."""

    width: int
    layers: int = 1
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, width: int, layers: int = 1, mode: str = "uniform", rng=None) -> "LstmParams":
        rng = np.random.default_rng(rng)
        c = width
        tensors = {}
        for layer in range(layers):
            if mode == "zero":
                w_ih, w_hh, b = np.zeros((4 * c, c)), np.zeros((4 * c, c)), np.zeros(4 * c)
            else:
                w_ih = _uniform(rng, (4 * c, c), c)
                w_hh = _uniform(rng, (4 * c, c), c)
                b = np.zeros(4 * c)
                b[c : 2 * c] = 1.0
            tensors[f"l{layer}.w_ih"] = w_ih
            tensors[f"l{layer}.w_hh"] = w_hh
            tensors[f"l{layer}.b"] = b
        return cls(width, layers, tensors)

    def arrays(self, prefix=""):
        return _arrays(self.tensors, prefix)

    def bind(self, nodes, prefix=""):
        return replace(self, tensors=_bind(self.tensors, nodes, prefix))


def lstm_encode(v: FrameFeatures, p: LstmParams) -> FrameFeatures:
    """Run the recurrence frame by frame; padded steps emit zeros and carry state unchanged."""
    c = p.width
    if v.channels != c:
        raise nk.DimensionError(f"LSTM width {c} does not match frame width {v.channels}")
    lead = v.value.shape[:-2]
    n = v.n_frames
    x = nk.reshape(v.node, (-1, n, c))
    mask = v.mask.reshape(-1, n).astype(np.float64)
    batch = x.shape[0]
    for layer in range(p.layers):
        w_ih = p.tensors[f"l{layer}.w_ih"]
        w_hh = nk.as_node(p.tensors[f"l{layer}.w_hh"])
        b = p.tensors[f"l{layer}.b"]
        h = nk.constant(np.zeros((batch, c)))
        cell = nk.constant(np.zeros((batch, c)))
        pre_in = nk.affine(x, w_ih, b)
        outputs = []
        for t in range(n):
            pre = pre_in[:, t, :] + nk.matmul(h, nk.transpose(w_hh))
            i = nk.sigmoid(pre[:, 0:c])
            f = nk.sigmoid(pre[:, c : 2 * c])
            g = nk.tanh(pre[:, 2 * c : 3 * c])
            o = nk.sigmoid(pre[:, 3 * c : 4 * c])
            new_cell = f * cell + i * g
            new_h = o * nk.tanh(new_cell)
            m = mask[:, t : t + 1]
            cell = new_cell * m + cell * (1 - m)
            h = new_h * m + h * (1 - m)
            outputs.append(nk.reshape(new_h * m, (batch, 1, c)))
        x = nk.concat(outputs, axis=1)
    return FrameFeatures(nk.reshape(x, lead + (n, c)), v.mask)


# ---------------------------------------------------------------- Transformer


def _layer_tensors(rng, c: int, mode: str) -> dict:
    def w(shape, fan_in):
        return np.zeros(shape) if mode == "zero" else _uniform(rng, shape, fan_in)

    t = {"ln1.g": np.ones(c), "ln1.b": np.zeros(c), "ln2.g": np.ones(c), "ln2.b": np.zeros(c)}
    for name in ("q", "k", "v", "o"):
        t[f"w{name}"] = w((c, c), c)
        t[f"b{name}"] = np.zeros(c)
    t["ff1.w"] = w((4 * c, c), c)
    t["ff1.b"] = np.zeros(4 * c)
    t["ff2.w"] = w((c, 4 * c), 4 * c)
    t["ff2.b"] = np.zeros(c)
    return t


@dataclass
class TransformerParams:
    width: int
    layers: int = 4
    heads: int = 8
    max_len: int = 12
    residual: bool = True
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.width % self.heads:
            raise gates.ConfigurationError(f"width {self.width} is not divisible by {self.heads} heads")

    @classmethod
    def init(cls, width, layers=4, heads=8, max_len=12, residual=True, mode="uniform", rng=None):
        rng = np.random.default_rng(rng)
        tensors = {"pos": np.zeros((max_len, width))}
        for layer in range(layers):
            for k, val in _layer_tensors(rng, width, mode).items():
                tensors[f"l{layer}.{k}"] = val
        return cls(width, layers, heads, max_len, residual, tensors)

    def arrays(self, prefix=""):
        return _arrays(self.tensors, prefix)

    def bind(self, nodes, prefix=""):
        return replace(self, tensors=_bind(self.tensors, nodes, prefix))


def quick_gelu(x: Node) -> Node:
    return x * nk.sigmoid(nk.scale(x, 1.702))


def _attention(x: Node, key_mask: np.ndarray, t: Mapping, heads: int, record: list | None) -> Node:
    b, n, c = x.shape
    d = c // heads

    def split(y):
        return nk.transpose(nk.reshape(y, (b, n, heads, d)), (0, 2, 1, 3))

    q = split(nk.affine(x, t["wq"], t["bq"]))
    k = split(nk.affine(x, t["wk"], t["bk"]))
    v = split(nk.affine(x, t["wv"], t["bv"]))
    scores = nk.scale(nk.matmul(q, nk.swap_last(k)), 1 / math.sqrt(d))
    att = nk.softmax(scores, axis=-1, mask=key_mask[:, None, None, :])
    if record is not None:
        record.append(att.value)
    ctx = nk.reshape(nk.transpose(nk.matmul(att, v), (0, 2, 1, 3)), (b, n, c))
    return nk.affine(ctx, t["wo"], t["bo"])


def encode_tokens(x: Node, key_mask: np.ndarray, p: TransformerParams, record: list | None = None) -> Node:
    """Pre-norm encoder stack over ``(B, T, C)`` tokens; no final norm."""
    for layer in range(p.layers):
        t = {k.split(".", 1)[1]: v for k, v in p.tensors.items() if k.startswith(f"l{layer}.")}
        a = nk.layer_norm(x, nk.as_node(t["ln1.g"]), nk.as_node(t["ln1.b"]))
        x = x + _attention(a, key_mask, t, p.heads, record)
        a = nk.layer_norm(x, nk.as_node(t["ln2.g"]), nk.as_node(t["ln2.b"]))
        x = x + nk.affine(quick_gelu(nk.affine(a, t["ff1.w"], t["ff1.b"])), t["ff2.w"], t["ff2.b"])
    return x


def transformer_encode(v: FrameFeatures, p: TransformerParams, attention: list | None = None) -> FrameFeatures:
    """Position embedding, encoder stack and the optional residual; padded rows come out zero.

    Per-layer attention maps are appended to ``attention`` when given.
    """
    n, c = v.n_frames, v.channels
    if c != p.width:
        raise nk.DimensionError(f"transformer width {p.width} does not match frame width {c}")
    if n > p.max_len:
        raise nk.DimensionError(f"{n} frames exceed the position table of {p.max_len}")
    lead = v.value.shape[:-2]
    x = nk.reshape(v.node, (-1, n, c))
    mask = v.mask.reshape(-1, n)
    pos = nk.as_node(p.tensors["pos"])[:n]
    y = encode_tokens(x + pos, mask, p, attention)
    if p.residual:
        y = y + x
    y = nk.mul(y, mask[..., None].astype(np.float64))
    return FrameFeatures(nk.reshape(y, lead + (n, c)), v.mask)


def sequential_aggregate(
    v: FrameFeatures,
    encoder,
    head: str = "meanP",
    excite: GateParams | None = None,
    aggregate: GateParams | None = None,
) -> Node:
    if head not in HEADS:
        raise gates.ConfigurationError(f"unknown head {head!r}; choose from {HEADS}")
    if head.startswith("excitation") and excite is None:
        raise gates.ConfigurationError(f"head {head!r} needs an excitation gate")
    if head.endswith("aggregation") and aggregate is None:
        raise gates.ConfigurationError(f"head {head!r} needs an aggregation gate")
    if isinstance(encoder, LstmParams):
        vt = lstm_encode(v, encoder)
    elif isinstance(encoder, TransformerParams):
        vt = transformer_encode(v, encoder)
    elif encoder is None:
        vt = v
    else:
        raise gates.ConfigurationError(f"unsupported encoder {type(encoder).__name__}")
    if head.startswith("excitation"):
        vt = gates.excitation(vt, excite)
    if head.endswith("aggregation"):
        return gates.aggregation(vt, aggregate)
    return gates.mean_pool(vt)


# --------------------------------------------------------------- tight scorer


@dataclass
class TightParams:
    """Cross encoder over ``[text; frames]``; ``encoder.max_len`` counts the text token."""

    encoder: TransformerParams
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, width, n_frames, layers=4, heads=8, mode="uniform", rng=None, head_mode=None):
        rng = np.random.default_rng(rng)
        encoder = TransformerParams.init(width, layers, heads, n_frames + 1, residual=False, mode=mode, rng=rng)
        hidden = math.ceil(width / 2)
        head_mode = head_mode or mode
        if head_mode == "zero":
            w1, w2 = np.zeros((hidden, width)), np.zeros((1, hidden))
        else:
            w1, w2 = _uniform(rng, (hidden, width), width), _uniform(rng, (1, hidden), hidden)
        tensors = {
            "seg": np.zeros((2, width)),
            "head1.w": w1,
            "head1.b": np.zeros(hidden),
            "head2.w": w2,
            "head2.b": np.zeros(1),
        }
        return cls(encoder, tensors)

    @property
    def width(self):
        return self.encoder.width

    def arrays(self, prefix=""):
        out = _arrays(self.tensors, prefix)
        out.update(self.encoder.arrays(prefix + "enc."))
        return out

    def bind(self, nodes, prefix=""):
        return TightParams(self.encoder.bind(nodes, prefix + "enc."), _bind(self.tensors, nodes, prefix))


def tight_score(text, v: FrameFeatures, p: TightParams, pre_excite: GateParams | None = None) -> Node:
    """Score paired ``text (..., C)`` and ``v (..., N, C)``; returns shape ``(...)``."""
    text = nk.as_node(text)
    c, n = p.width, v.n_frames
    if text.shape[-1] != c or v.channels != c:
        raise nk.DimensionError(f"text {text.shape} / frames {v.value.shape} do not match width {c}")
    if n + 1 > p.encoder.max_len:
        raise nk.DimensionError(f"{n} frames exceed the position table of {p.encoder.max_len - 1}")
    if pre_excite is not None:
        v = gates.excitation(v, pre_excite)
    lead = v.value.shape[:-2]
    if text.shape[:-1] != lead:
        raise nk.DimensionError(f"text batch {text.shape[:-1]} does not match video batch {lead}")
    frames = nk.reshape(v.node, (-1, n, c))
    batch = frames.shape[0]
    tokens = nk.concat([nk.reshape(text, (batch, 1, c)), frames], axis=1)
    seg = nk.as_node(p.tensors["seg"])
    segment_rows = np.r_[0, np.ones(n, dtype=int)]
    tokens = tokens + seg[segment_rows] + nk.as_node(p.encoder.tensors["pos"])[: n + 1]
    key_mask = np.concatenate([np.ones((batch, 1), dtype=bool), v.mask.reshape(batch, n)], axis=1)
    out = encode_tokens(tokens, key_mask, p.encoder)
    first = out[:, 0, :]
    hidden = nk.relu(nk.affine(first, p.tensors["head1.w"], p.tensors["head1.b"]))
    score = nk.affine(hidden, p.tensors["head2.w"], p.tensors["head2.b"])
    return nk.reshape(score, lead)


def tight_similarity(texts, videos: FrameFeatures, p: TightParams, pre_excite: GateParams | None = None) -> Node:
    """All-pairs cross-encoded scores, ``(Q, C)`` texts against ``(M, N, C)`` videos."""
    texts = nk.as_node(texts)
    if pre_excite is not None:
        videos = gates.excitation(videos, pre_excite)
    q = texts.shape[0]
    m, n, c = videos.value.shape
    t = nk.broadcast_to(nk.reshape(texts, (q, 1, c)), (q, m, c))
    f = nk.broadcast_to(nk.reshape(videos.node, (1, m, n, c)), (q, m, n, c))
    mask = np.broadcast_to(videos.mask[None], (q, m, n))
    return tight_score(t, FrameFeatures(f, mask), p)
