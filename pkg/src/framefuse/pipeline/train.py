"""Seeded training loop and checkpoint serialization."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numkernel as nk
from .. import retrieval
from ..calculators import Calculator
from .config import TrainConfig
from .data import Dataset
from .featio import decode_feat, encode_feat
from .optim import adam_step, cosine_lr

CHECKPOINT_FORMAT = "framefuse-checkpoint/1"


class TrainingError(RuntimeError):
    pass


def _pack(tensors: dict) -> dict:
    out = {}
    for name in sorted(tensors):
        a = np.asarray(tensors[name], dtype=np.float64)
        out[name] = {"shape": list(a.shape), "feat": base64.b64encode(encode_feat(a.reshape(1, -1), 2)).decode()}
    return out


def _unpack(doc: dict) -> dict:
    return {name: decode_feat(base64.b64decode(d["feat"])).reshape(d["shape"]) for name, d in doc.items()}


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def to_bytes(self) -> bytes:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "step": self.step,
            "params": _pack(self.params),
            "adam_m": _pack(self.m),
            "adam_v": _pack(self.v),
        }
        return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        doc = json.loads(blob)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a framefuse checkpoint (format {doc.get('format')!r})")
        config = TrainConfig.from_dict(doc["config"])
        if config.digest() != doc["config_hash"]:
            raise ValueError("checkpoint config hash does not match its config")
        return cls(config, _unpack(doc["params"]), _unpack(doc["adam_m"]), _unpack(doc["adam_v"]), doc["step"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def evaluate(calc: Calculator, params: dict, dataset: Dataset) -> dict[str, retrieval.RetrievalReport]:
    texts, videos = dataset.batch(np.arange(len(dataset)), calc.config.frames)
    return retrieval.both_directions(calc.scores(params, texts, videos))


def similarity_scores(checkpoint: Checkpoint, dataset: Dataset) -> np.ndarray:
    calc = Calculator(checkpoint.config)
    texts, videos = dataset.batch(np.arange(len(dataset)), checkpoint.config.frames)
    return calc.scores(checkpoint.params, texts, videos)


def _batches(rng, n: int, size: int):
    order = rng.permutation(n)
    starts = range(0, n, size)
    chunks = [order[s : s + size] for s in starts]
    # a trailing batch of one has no negatives; fold it into the previous batch
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train(config: TrainConfig, dataset: Dataset, log=None) -> tuple[Checkpoint, list[dict]]:
    """Fit the configured calculator on frozen embeddings.

    Returns the final checkpoint and one log record per epoch. ``log`` is
    called with each record as it is produced.
    """
    if dataset.channels != config.channels:
        raise TrainingError(f"dataset width {dataset.channels} does not match config channels {config.channels}")
    if len(dataset) < 2:
        raise TrainingError("contrastive training needs at least two pairs")
    calc = Calculator(config)
    params = calc.init_params()
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    step = 0
    shuffle = np.random.default_rng([config.seed, 1])
    per_epoch = len(_batches(np.random.default_rng(0), len(dataset), config.batch_size))
    total = max(1, config.epochs * per_epoch)
    history = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        lr = config.lr
        for idx in _batches(shuffle, len(dataset), config.batch_size):
            texts, videos = dataset.batch(idx, config.frames)
            leaves = {k: nk.leaf(p) for k, p in params.items()}
            loss = calc.loss(leaves, texts, videos)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step + 1}")
            losses.append(value)
            if not params:
                continue
            loss.backward()
            grads = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(p) for k, p in params.items()}
            lr = cosine_lr(step, total, config.lr)
            step += 1
            params, m, v = adam_step(params, grads, m, v, step, lr)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        reports = None
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            reports = evaluate(calc, params, dataset)
            record.update({d: r.as_dict() for d, r in reports.items()})
        history.append(record)
        if log is not None:
            log(record)
        if config.early_stop and reports is not None and reports["T2V"].r_at[1] == 100.0:
            break
    return Checkpoint(config, params, m, v, step), history
