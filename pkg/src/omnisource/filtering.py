"""Teacher filtering of web pools into pseudo-labeled auxiliary data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Manifest, Sample
from .teacher import ClassifierModel, ensemble_proba


class ConsensusMismatch(ValueError):
    """Teacher kind cannot score the pool's sample format."""


@dataclass(frozen=True)
class FilterConfig:
    threshold: float = 0.5
    teacher_kind: str = "2d"
    per_frame: bool = False

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be within [0, 1]")
        if self.teacher_kind not in ("2d", "3d"):
            raise ValueError("teacher_kind is '2d' or '3d'")


@dataclass
class FilterReport:
    pool_size: int
    kept: int
    rejected: int
    histogram: list = field(default_factory=list)

    @property
    def rejection_rate(self) -> float:
        return self.rejected / self.pool_size if self.pool_size else 0.0

    def to_dict(self) -> dict:
        return {
            "pool_size": self.pool_size,
            "kept": self.kept,
            "rejected": self.rejected,
            "rejection_rate": self.rejection_rate,
            "histogram": list(self.histogram),
        }


def _check_teachers(teachers, pool: Manifest, config: FilterConfig):
    want = "segment-average" if config.teacher_kind == "2d" else "stack-k"
    for t in teachers:
        if t.K != pool.label_space.K:
            raise ValueError(f"teacher has K={t.K}, pool label space has K={pool.label_space.K}")
        if t.consensus != want:
            raise ConsensusMismatch(f"teacher_kind {config.teacher_kind} but teacher uses {t.consensus}")
    if config.teacher_kind == "3d" and any(s.source_kind == "image" for s in pool):
        raise ConsensusMismatch("3d (stack-k) teachers cannot score single-frame images")


def _best_frame(sample: Sample, teachers) -> np.ndarray:
    """Probabilities of the most confident single frame (earliest on ties)."""
    best = None
    for f in sample.frames:
        p = ensemble_proba(teachers, Sample(id=sample.id, source_kind="image", frames=(f,)))
        if best is None or p.max() > best.max():
            best = p
    return best


def score_pool(pool: Manifest, teachers: Sequence[ClassifierModel], per_frame: bool = False) -> np.ndarray:
    """(n, K) teacher probabilities; each teacher featurizes samples from their frames.

    With ``per_frame``, untrimmed videos are scored frame by frame and take
    the most confident frame's distribution.
    """
    rows = []
    for s in pool:
        if per_frame and s.source_kind == "untrimmed":
            rows.append(_best_frame(s, teachers))
            continue
        src = s.with_(feature=None) if s.frames else s
        rows.append(ensemble_proba(teachers, src))
    return np.array(rows).reshape(len(pool), -1)


def filter_pool(pool: Manifest, teachers, config: FilterConfig | None = None):
    """Keep samples whose max teacher probability reaches the threshold.

    Returns ``(auxiliary_manifest, report)``.  Kept samples carry the argmax
    class as pseudo-label and the max probability as confidence.
    """
    config = config or FilterConfig()
    if isinstance(teachers, ClassifierModel):
        teachers = [teachers]
    if pool.role not in ("web", "auxiliary"):
        raise ValueError(f"filter_pool expects a web pool, got role {pool.role!r}")
    _check_teachers(teachers, pool, config)
    probs = score_pool(pool, teachers, config.per_frame)
    kept = []
    hist = np.zeros(pool.label_space.K, dtype=np.int64)
    for s, p in zip(pool.samples, probs):
        conf = float(p.max())
        if conf >= config.threshold:
            cls = int(np.argmax(p))
            hist[cls] += 1
            kept.append(s.with_(label=None, pseudo_label=cls, confidence=min(conf, 1.0)))
    report = FilterReport(len(pool), len(kept), len(pool) - len(kept), hist.tolist())
    return pool.with_samples(kept, role="auxiliary"), report


def class_distribution(manifest: Manifest) -> np.ndarray:
    counts = np.zeros(manifest.label_space.K, dtype=np.int64)
    for s in manifest:
        cls = s.target_class
        if cls is None:
            raise ValueError(f"sample {s.id} is unlabeled")
        counts[cls] += 1
    return counts
