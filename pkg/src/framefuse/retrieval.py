"""Similarity matrices, symmetric contrastive loss, rank metrics and the similarity audit."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import gates
from . import numkernel as nk
from .gates import FrameFeatures
from .numkernel import Node

KS = (1, 5, 10)
TIE_POLICY = "rank = 1 + #(scores strictly greater than the correct one)"
CSV_HEADER = ["direction", "R@1", "R@5", "R@10", "MdR", "MnR", "RSum"]


def eval_threads() -> int:
    raw = os.environ.get("FRAMEFUSE_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def similarity_matrix(texts, videos, normalize: bool = True) -> Node:
    """``(Q, C) x (M, C) -> (Q, M)``; cosine when ``normalize`` else raw dot products."""
    texts, videos = nk.as_node(texts), nk.as_node(videos)
    if texts.shape[-1] != videos.shape[-1]:
        raise nk.DimensionError(f"text width {texts.shape} does not match video width {videos.shape}")
    if normalize:
        texts, videos = nk.l2_normalize(texts), nk.l2_normalize(videos)
    return nk.matmul(texts, nk.transpose(videos))


def contrastive_loss(sim, temperature=0.05) -> Node:
    """Mean of text-to-video and video-to-text cross-entropy over a square batch.

    ``temperature`` may be a positive float or a Node holding the logit scale
    multiplier (``1/tau``) when the temperature is learned.
    """
    sim = nk.as_node(sim)
    b = sim.shape[0]
    if sim.value.ndim != 2 or sim.shape[1] != b:
        raise nk.DimensionError(f"contrastive loss needs a square matrix, got {sim.shape}")
    if isinstance(temperature, Node):
        logits = nk.mul(sim, temperature)
    else:
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        logits = nk.scale(sim, 1.0 / temperature)
    diag = (np.arange(b), np.arange(b))
    rows = nk.mean(nk.log_softmax(logits, axis=1)[diag])
    cols = nk.mean(nk.log_softmax(logits, axis=0)[diag])
    return nk.scale(rows + cols, -0.5)


@dataclass
class RetrievalReport:
    r_at: dict
    mdr: float
    mnr: float
    ranks: np.ndarray = field(repr=False)
    tie_policy: str = TIE_POLICY

    @property
    def rsum(self) -> float:
        return float(sum(self.r_at.values()))

    def row(self, direction: str) -> list[str]:
        vals = [self.r_at[k] for k in KS] + [self.mdr, self.mnr, self.rsum]
        return [direction] + [f"{x:.1f}" for x in vals]

    def as_dict(self) -> dict:
        out = {f"R@{k}": float(v) for k, v in self.r_at.items()}
        out.update(MdR=float(self.mdr), MnR=float(self.mnr), RSum=self.rsum)
        return out


def _ranks(scores: np.ndarray, truth: np.ndarray) -> np.ndarray:
    correct = scores[np.arange(len(truth)), truth]
    return 1 + (scores > correct[:, None]).sum(axis=1)


def rank_metrics(sim, ground_truth=None, ks=KS) -> RetrievalReport:
    """Rank every query's correct column; ties count in the query's favour."""
    scores = np.asarray(sim.value if isinstance(sim, Node) else sim, dtype=np.float64)
    q, m = scores.shape
    truth = np.arange(q) if ground_truth is None else np.asarray(ground_truth)
    if truth.shape != (q,) or np.any(truth < 0) or np.any(truth >= m):
        raise ValueError("missing ground truth: every query needs a column index in range")
    threads = min(eval_threads(), max(1, q // 256))
    if threads > 1:
        chunks = np.array_split(np.arange(q), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = pool.map(lambda idx: _ranks(scores[idx], truth[idx]), chunks)
        ranks = np.concatenate(list(parts))
    else:
        ranks = _ranks(scores, truth)
    r_at = {k: 100.0 * float(np.mean(ranks <= k)) for k in ks}
    return RetrievalReport(r_at, float(np.median(ranks)), float(np.mean(ranks)), ranks)


def both_directions(sim) -> dict[str, RetrievalReport]:
    scores = np.asarray(sim.value if isinstance(sim, Node) else sim)
    return {"T2V": rank_metrics(scores), "V2T": rank_metrics(scores.T)}


def reports_csv(reports: dict[str, RetrievalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for direction, report in reports.items():
        w.writerow(report.row(direction))
    return buf.getvalue()


@dataclass
class SimilarityAudit:
    min_sim: float
    max_sim: float
    meanp_sim: float
    per_frame: np.ndarray = field(repr=False)


def betweenness_audit(text, v: FrameFeatures, normalize: bool = False) -> SimilarityAudit:
    """Compare the pooled-video similarity with the spread of per-frame similarities."""
    t = np.asarray(text, dtype=np.float64)
    frames = v.value[v.mask]
    pooled = gates.mean_pool(v).value
    if normalize:
        t = t / np.linalg.norm(t)
        frames = frames / np.linalg.norm(frames, axis=1, keepdims=True)
        pooled = pooled / np.linalg.norm(pooled)
    per_frame = frames @ t
    return SimilarityAudit(float(per_frame.min()), float(per_frame.max()), float(pooled @ t), per_frame)
