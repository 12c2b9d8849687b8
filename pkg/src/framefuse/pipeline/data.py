"""Paired caption/frame embedding datasets, fixed-length framing and a synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..gates import FrameFeatures
from . import featio


def pad_and_mask(frames, n_frames: int) -> FrameFeatures:
    """Subsample long clips at indices ``floor(i*n/N)``; zero-pad short ones."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"need at least one frame of shape (n, C), got {frames.shape}")
    n, c = frames.shape
    if n >= n_frames:
        idx = (np.arange(n_frames) * n) // n_frames
        return FrameFeatures(frames[idx], np.ones(n_frames, dtype=bool))
    out = np.zeros((n_frames, c))
    out[:n] = frames
    return FrameFeatures(out, np.arange(n_frames) < n)


def stack_frames(clips, n_frames: int) -> FrameFeatures:
    padded = [pad_and_mask(f, n_frames) for f in clips]
    return FrameFeatures(np.stack([p.value for p in padded]), np.stack([p.mask for p in padded]))


@dataclass
class Dataset:
    """One caption per video; item ``i`` pairs ``captions[i]`` with ``frames[i]``."""

    ids: list
    captions: np.ndarray
    frames: list
    relevance: list | None = None

    def __post_init__(self):
        self.captions = np.asarray(self.captions, dtype=np.float64)
        if len(self.ids) != len(self.captions) or len(self.frames) != len(self.captions):
            raise ValueError("ids, captions and frames must have one entry per item")
        for f in self.frames:
            if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] != self.channels:
                raise ValueError(f"frame block of shape {f.shape} does not fit width {self.channels}")

    def __len__(self):
        return len(self.ids)

    @property
    def channels(self) -> int:
        return self.captions.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        rel = None if self.relevance is None else [self.relevance[i] for i in idx]
        return Dataset([self.ids[i] for i in idx], self.captions[idx], [self.frames[i] for i in idx], rel)

    def batch(self, idx, n_frames: int):
        idx = np.asarray(idx)
        return self.captions[idx], stack_frames([self.frames[i] for i in idx], n_frames)

    def save(self, directory) -> Path:
        """Write FEAT files plus ``manifest.json`` under ``directory``; returns the manifest path."""
        directory = Path(directory)
        (directory / "feat").mkdir(parents=True, exist_ok=True)
        items = []
        for vid, cap, frames in zip(self.ids, self.captions, self.frames):
            featio.write_feat(directory / "feat" / f"{vid}.caption.feat", cap)
            featio.write_feat(directory / "feat" / f"{vid}.frames.feat", frames)
            items.append({"id": vid, "caption_feat": f"feat/{vid}.caption.feat", "frame_feat": f"feat/{vid}.frames.feat"})
        manifest = directory / "manifest.json"
        featio.write_manifest(manifest, items)
        return manifest


def load_dataset(manifest) -> Dataset:
    items = featio.read_manifest(manifest)
    captions, frames = [], []
    for item in items:
        cap = featio.read_feat(item["caption_feat"])
        if cap.shape[0] != 1:
            raise featio.FeatFormatError(f"{item['caption_feat']}: caption block must have one row")
        captions.append(cap[0])
        frames.append(featio.read_feat(item["frame_feat"]))
    return Dataset([i["id"] for i in items], np.stack(captions), frames)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def synth_dataset(
    size: int,
    channels: int,
    n_range=(12, 24),
    separation: float = 4.0,
    noise: float = 0.3,
    seed: int = 0,
    irrelevant=(0, 4),
    distractor: float = 1.0,
    profiles=None,
) -> Dataset:
    """Caption/frame pairs built around per-item anchor directions.

    Captions are ``anchor + noise``. Frames are ``relevance * anchor + noise``
    where irrelevant frames (relevance 0) sit at the start and end of the clip
    and carry a shared "blank frame" direction scaled by ``distractor``.
    ``separation`` controls how far anchors spread from a common direction.
    ``profiles`` overrides the sampled per-frame relevance vectors.

    Values are rounded to float32 so FEAT files reproduce the dataset exactly.
    """
    if size < 2 or channels < 1 or n_range[0] < 1 or n_range[1] < n_range[0]:
        raise ValueError("synth_dataset needs size >= 2, channels >= 1 and a valid frame range")
    rng = np.random.default_rng(seed)
    shared = _unit(rng.standard_normal(channels))
    blank = _unit(np.ones(channels) + 0.5 * rng.standard_normal(channels))
    anchors = _unit(separation * _unit(rng.standard_normal((size, channels))) + shared)
    scale = noise / np.sqrt(channels)
    captions = anchors + scale * rng.standard_normal((size, channels))
    frames, relevance = [], []
    for i in range(size):
        if profiles is not None:
            rel = np.asarray(profiles[i], dtype=np.float64)
        else:
            n = int(rng.integers(n_range[0], n_range[1] + 1))
            n_irr = min(int(rng.integers(irrelevant[0], irrelevant[1] + 1)), n - 1)
            intro = int(rng.integers(0, n_irr + 1))
            rel = rng.uniform(0.7, 1.0, n)
            rel[:intro] = 0.0
            rel[n - (n_irr - intro) :] = 0.0
        block = rel[:, None] * anchors[i] + (rel == 0)[:, None] * distractor * blank
        block = block + scale * rng.standard_normal(block.shape)
        frames.append(block.astype(np.float32).astype(np.float64))
        relevance.append(rel)
    ids = [f"video{i}" for i in range(size)]
    return Dataset(ids, captions.astype(np.float32).astype(np.float64), frames, relevance)
