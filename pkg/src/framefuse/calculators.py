"""Similarity calculators: every way of turning frames plus a caption into a score.

Parameters live in one flat ``name -> array`` dict so the optimizer,
checkpoints and gradient checks can treat every calculator alike.
"""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Mapping

import numpy as np

from . import context, gates, retrieval
from . import numkernel as nk
from .gates import SIGMOID, SOFTMAX, FrameFeatures
from .numkernel import Node

if TYPE_CHECKING:
    from .pipeline.config import TrainConfig


class Calculator:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.kind = config.calculator

    # -- parameters ---------------------------------------------------------

    def init_params(self, rng=None) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        params: dict[str, np.ndarray] = {}
        if self.kind == "seqLSTM":
            params.update(context.LstmParams.init(cfg.channels, cfg.lstm_layers, cfg.init, rng).arrays("lstm."))
        elif self.kind == "seqTransf":
            enc = context.TransformerParams.init(
                cfg.channels, cfg.transformer_layers, cfg.heads, cfg.frames, cfg.residual, cfg.init, rng
            )
            params.update(enc.arrays("transf."))
        elif self.kind == "tight":
            tight = context.TightParams.init(cfg.channels, cfg.frames, cfg.transformer_layers, cfg.heads, cfg.init, rng)
            params.update(tight.arrays("tight."))
        if cfg.uses_excitation:
            g = gates.init_gate(cfg.frames, cfg.paradigm(cfg.excitation_paradigm), SIGMOID, cfg.init, rng)
            params.update(g.arrays("excite."))
        if cfg.uses_aggregation:
            g = gates.init_gate(cfg.frames, cfg.paradigm(cfg.aggregation_paradigm), SOFTMAX, cfg.init, rng)
            params.update(g.arrays("aggregate."))
        if cfg.learn_temperature:
            params["logit_scale"] = np.array([math.log(1.0 / cfg.temperature)])
        return params

    def _gate(self, P, stage):
        cfg = self.config
        if stage == "excitation":
            template = gates.init_gate(cfg.frames, cfg.paradigm(cfg.excitation_paradigm), SIGMOID)
            return template.bind(P, "excite.")
        template = gates.init_gate(cfg.frames, cfg.paradigm(cfg.aggregation_paradigm), SOFTMAX)
        return template.bind(P, "aggregate.")

    def _encoder(self, P):
        cfg = self.config
        if self.kind == "seqLSTM":
            tensors = {k[5:]: v for k, v in P.items() if k.startswith("lstm.")}
            return context.LstmParams(cfg.channels, cfg.lstm_layers, tensors)
        if self.kind == "seqTransf":
            tensors = {k[7:]: v for k, v in P.items() if k.startswith("transf.")}
            return context.TransformerParams(cfg.channels, cfg.transformer_layers, cfg.heads, cfg.frames, cfg.residual, tensors)
        return None

    def _tight(self, P) -> context.TightParams:
        cfg = self.config
        enc = {k[len("tight.enc.") :]: v for k, v in P.items() if k.startswith("tight.enc.")}
        rest = {k[len("tight.") :]: v for k, v in P.items() if k.startswith("tight.") and not k.startswith("tight.enc.")}
        encoder = context.TransformerParams(cfg.channels, cfg.transformer_layers, cfg.heads, cfg.frames + 1, False, enc)
        return context.TightParams(encoder, rest)

    # -- forward ------------------------------------------------------------

    def encode_videos(self, P: Mapping[str, Node], videos: FrameFeatures, record: dict | None = None) -> Node:
        """Video representations ``(M, C)``; gate weights land in ``record`` when given."""
        if self.kind == "tight":
            raise gates.ConfigurationError("the tight calculator scores pairs and has no standalone video vector")
        cfg = self.config
        v = videos
        enc = self._encoder(P)
        if isinstance(enc, context.LstmParams):
            v = context.lstm_encode(v, enc)
        elif isinstance(enc, context.TransformerParams):
            v = context.transformer_encode(v, enc)
        if cfg.uses_excitation:
            g = self._gate(P, "excitation")
            if record is not None:
                record["excitation"] = gates.gate_weights(v, g).value
            v = gates.excitation(v, g)
        if cfg.uses_aggregation:
            g = self._gate(P, "aggregation")
            if record is not None:
                record["aggregation"] = gates.gate_weights(v, g).value
            return gates.aggregation(v, g)
        return gates.mean_pool(v)

    def similarity(self, P: Mapping[str, Node], texts, videos: FrameFeatures, record: dict | None = None) -> Node:
        """Score matrix ``(Q, M)`` between caption embeddings and videos."""
        if self.kind == "tight":
            pre = None
            if self.config.pre_excite:
                pre = self._gate(P, "excitation")
                if record is not None:
                    record["excitation"] = gates.gate_weights(videos, pre).value
            return context.tight_similarity(texts, videos, self._tight(P), pre)
        return retrieval.similarity_matrix(texts, self.encode_videos(P, videos, record), normalize=True)

    def scores(self, params: Mapping[str, np.ndarray], texts, videos: FrameFeatures, chunk: int = 8) -> np.ndarray:
        """Inference-only score matrix; the tight calculator is evaluated ``chunk`` queries at a time."""
        P = as_constants(params)
        if self.kind != "tight":
            return self.similarity(P, texts, videos).value
        texts = np.asarray(texts)
        rows = [self.similarity(P, texts[s : s + chunk], videos).value for s in range(0, len(texts), chunk)]
        return np.concatenate(rows, axis=0)

    def loss(self, P, texts, videos: FrameFeatures) -> Node:
        return retrieval.contrastive_loss(self.similarity(P, texts, videos), self._loss_temperature(P))

    def _loss_temperature(self, P):
        if self.config.learn_temperature:
            return nk.exp(P["logit_scale"])
        return self.config.temperature

    def frame_weights(self, params: Mapping[str, np.ndarray], texts, videos: FrameFeatures) -> dict[str, np.ndarray]:
        record: dict = {}
        self.similarity(as_constants(params), texts[:1], videos, record)
        return record


def as_constants(params: Mapping[str, np.ndarray]) -> dict[str, Node]:
    return {k: nk.constant(v) for k, v in params.items()}
