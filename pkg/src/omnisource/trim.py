"""Untrimmed videos -> sparse snippets (segment students) or fixed clips (clip students)."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .core import Sample
from .teacher import ClassifierModel, predict_proba

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SnippetConfig:
    sample_fps: float = 1.0
    threshold: float = 0.5
    n_pos: int = 1
    n_neg: int = 2

    def __post_init__(self):
        if self.n_pos < 1 or self.n_neg < 0:
            raise ValueError("need n_pos >= 1 and n_neg >= 0")
        if not self.sample_fps > 0:
            raise ValueError("sample_fps must be > 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be within [0, 1]")


@dataclass(frozen=True)
class ClipConfig:
    clip_seconds: float = 10.0
    threshold: float = 0.5

    def __post_init__(self):
        if not self.clip_seconds > 0:
            raise ValueError("clip_seconds must be > 0")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be within [0, 1]")


@dataclass(frozen=True)
class FrameScore:
    index: int
    confidence: float
    label: int
    positive: bool


def _frame_sample(video: Sample, i: int) -> Sample:
    return Sample(id=f"{video.id}@{i}", source_kind="image", frames=(video.frames[i],), fps=video.fps)


def score_frames(video: Sample, teacher: ClassifierModel, config: SnippetConfig) -> list[FrameScore]:
    """Score frames sampled at ``config.sample_fps`` independently with a 2D teacher."""
    if video.source_kind != "untrimmed":
        raise ValueError(f"score_frames expects an untrimmed video, got {video.source_kind}")
    if teacher.consensus != "segment-average":
        raise ValueError("frame scoring needs a segment-average (2D) teacher")
    stride = max(1, math.floor(video.fps / config.sample_fps))
    if len(video.frames) < stride:
        raise ValueError(f"video {video.id} is shorter than one sampling stride ({stride} frames)")
    scores = []
    for i in range(0, len(video.frames), stride):
        p = predict_proba(teacher, _frame_sample(video, i))
        conf = float(p.max())
        scores.append(FrameScore(i, conf, int(np.argmax(p)), conf >= config.threshold))
    return scores


def _snippet_label(pos: list[FrameScore]) -> int:
    votes = Counter(s.label for s in pos)
    top = max(votes.values())
    tied = {c for c, v in votes.items() if v == top}
    if len(tied) == 1:
        return tied.pop()
    best = max((s for s in pos if s.label in tied), key=lambda s: (s.confidence, -s.index))
    return best.label


def build_snippets(
    video: Sample, frame_scores: list[FrameScore], config: SnippetConfig, rng: np.random.Generator
) -> list[Sample]:
    """Each positive is used once; every snippet also gets ``n_neg`` negatives.

    Frames inside a snippet keep their original temporal order.
    """
    pos = [s for s in frame_scores if s.positive]
    neg = [s for s in frame_scores if not s.positive]
    if len(pos) < config.n_pos or len(neg) < config.n_neg:
        log.info("video %s: %d positives / %d negatives, no snippets", video.id, len(pos), len(neg))
        return []
    pos_order = rng.permutation(len(pos))
    out = []
    for j in range(len(pos) // config.n_pos):
        chosen_pos = [pos[i] for i in pos_order[j * config.n_pos : (j + 1) * config.n_pos]]
        chosen_neg = [neg[i] for i in rng.choice(len(neg), size=config.n_neg, replace=False)]
        chosen = sorted(chosen_pos + chosen_neg, key=lambda s: s.index)
        out.append(
            Sample(
                id=f"{video.id}#snip{j}",
                source_kind="trimmed",
                frames=tuple(video.frames[s.index] for s in chosen),
                fps=video.fps,
                pseudo_label=_snippet_label(chosen_pos),
                confidence=float(np.mean([s.confidence for s in chosen_pos])),
            )
        )
    return out


def clip_windows(n_frames: int, fps: float, clip_seconds: float) -> list[tuple[int, int]]:
    """Consecutive ``[start, stop)`` windows; the trailing partial window is dropped."""
    width = max(1, int(round(clip_seconds * fps)))
    return [(k * width, (k + 1) * width) for k in range(n_frames // width)]


def cut_clips(video: Sample, teacher: ClassifierModel, config: ClipConfig) -> list[Sample]:
    """Score each window with a stack-k (3D) teacher and keep the confident ones."""
    if video.source_kind != "untrimmed":
        raise ValueError(f"cut_clips expects an untrimmed video, got {video.source_kind}")
    if teacher.consensus != "stack-k":
        raise ValueError("clip cutting needs a stack-k (3D) teacher")
    out = []
    for k, (a, b) in enumerate(clip_windows(len(video.frames), video.fps, config.clip_seconds)):
        clip = Sample(id=f"{video.id}#clip{k}", source_kind="trimmed", frames=video.frames[a:b], fps=video.fps)
        p = predict_proba(teacher, clip)
        conf = float(p.max())
        if conf >= config.threshold:
            out.append(clip.with_(pseudo_label=int(np.argmax(p)), confidence=min(conf, 1.0)))
    return out
