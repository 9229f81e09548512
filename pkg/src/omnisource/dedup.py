"""Content-based de-duplication of web pools against reference sets.

Every frame is described by the same grid feature the classifiers use.  The
features are ZCA-whitened, and a web sample is a suspected duplicate when
the cosine similarity between any of its frames and any reference frame
reaches a threshold.  By default the threshold is the mean similarity among
random crops of one frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DimensionError, Manifest, Sample, as_frame, frame_feature, make_rng
from .inflate import Homography, apply_homography

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DedupConfig:
    crops_per_frame: int = 4
    crop_ratio: tuple = (0.75, 0.95)
    whiten: bool = True
    fit_on: str = "union"
    threshold_override: float | None = None
    grid: int = 8
    ridge: float = 1e-9
    max_threshold_frames: int = 64
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_ratio
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_ratio must satisfy 0 < lo <= hi <= 1")
        if self.threshold_override is None and self.crops_per_frame < 2:
            raise ValueError("crops_per_frame must be >= 2 to derive a threshold")
        if self.fit_on not in ("union", "references"):
            raise ValueError("fit_on is 'union' or 'references'")
        if self.threshold_override is not None and not -1.0 <= self.threshold_override <= 1.0:
            raise ValueError("threshold_override must be within [-1, 1]")


@dataclass
class DedupReport:
    threshold: float
    pairs: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    @property
    def flagged_count(self) -> int:
        return len(self.flagged)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "flagged_count": self.flagged_count,
            "flagged": list(self.flagged),
            "pairs": [{"web": w, "reference": r, "similarity": s} for w, r, s in self.pairs],
        }


@dataclass(frozen=True, eq=False)
class Whitening:
    """``x -> (x - mean) @ W``; W is symmetric (ZCA) so whitened axes stay aligned."""

    mean: np.ndarray
    matrix: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.mean.size:
            raise DimensionError(f"features have {X.shape[1]} dims, whitening expects {self.mean.size}")
        return (X - self.mean) @ self.matrix


def fit_whitening(X, ridge: float = 1e-9) -> Whitening:
    """ZCA transform from the 1/n covariance.

    Eigenvalues below ``ridge * max(1, largest eigenvalue)`` are floored to
    that value so rank-deficient inputs give finite output.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("whitening needs at least 2 feature vectors")
    mean = X.mean(axis=0)
    D = X - mean
    cov = D.T @ D / X.shape[0]
    cov = 0.5 * (cov + cov.T)
    lam, V = np.linalg.eigh(cov)
    floor = ridge * max(1.0, float(lam.max()))
    lam = np.maximum(lam, floor)
    W = (V / np.sqrt(lam)) @ V.T
    return Whitening(mean, 0.5 * (W + W.T))


def whiten(features, ridge: float = 1e-9):
    """Returns ``(whitened rows, transform)``."""
    t = fit_whitening(features, ridge)
    return t.apply(features), t


def cosine_matrix(A, B) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm give similarity 0."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    An = np.divide(A, na[:, None], out=np.zeros_like(A), where=na[:, None] > 0)
    Bn = np.divide(B, nb[:, None], out=np.zeros_like(B), where=nb[:, None] > 0)
    return np.clip(An @ Bn.T, -1.0, 1.0)


def random_crop(frame, ratio: tuple, rng: np.random.Generator) -> np.ndarray:
    """A random sub-window covering ``ratio`` of each side, scaled back to full size."""
    img = as_frame(frame)
    h, w = img.shape[:2]
    rw, rh = rng.uniform(ratio[0], ratio[1], size=2)
    cw, ch = rw * (w - 1), rh * (h - 1)
    if min(w, h) < 4:
        raise ValueError(f"frame {w}x{h} is too small to crop")
    x0 = rng.uniform(0.0, (w - 1) - cw)
    y0 = rng.uniform(0.0, (h - 1) - ch)
    # output pixel (u, v) samples the input at (x0 + u*cw/(w-1), y0 + v*ch/(h-1))
    sx = (w - 1) / cw if cw > 0 else 1.0
    sy = (h - 1) / ch if ch > 0 else 1.0
    fwd = np.array([[sx, 0.0, -x0 * sx], [0.0, sy, -y0 * sy], [0.0, 0.0, 1.0]])
    return apply_homography(img, Homography.from_pixel(fwd, w, h), fill="edge")


def _frame_rows(samples: Sequence[Sample], grid: int):
    """Frame features and the owning sample index of each row."""
    rows, owner = [], []
    for i, s in enumerate(samples):
        if s.frames:
            for f in s.frames:
                rows.append(frame_feature(f, grid))
                owner.append(i)
        elif s.feature is not None:
            rows.append(np.asarray(s.feature, dtype=np.float64))
            owner.append(i)
        else:
            raise ValueError(f"sample {s.id} has neither frames nor a feature")
    return rows, np.asarray(owner, dtype=np.int64)


def _group_max(S, owner, axis):
    """Max over runs of equal ``owner`` along ``axis`` (owners are sorted)."""
    starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
    return np.maximum.reduceat(S, starts, axis=axis)


def derive_threshold(frames, config: DedupConfig | None = None, transform: Whitening | None = None) -> float:
    """Mean pairwise cosine among crops of the same frame, averaged over frames.

    Crop features are whitened with ``transform`` when given, otherwise with a
    transform fitted on the crops themselves.
    """
    config = config or DedupConfig()
    if config.crops_per_frame < 2:
        raise ValueError("crops_per_frame must be >= 2")
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame to derive a threshold")
    rng = make_rng(config.seed, "dedup-crops")
    feats = [
        [frame_feature(random_crop(f, config.crop_ratio, rng), config.grid) for _ in range(config.crops_per_frame)]
        for f in frames
    ]
    F = np.asarray(feats)
    n, c, d = F.shape
    if config.whiten:
        flat = F.reshape(n * c, d)
        t = transform if transform is not None else fit_whitening(flat, config.ridge)
        F = t.apply(flat).reshape(n, c, d)
    iu = np.triu_indices(c, k=1)
    sims = [cosine_matrix(F[i], F[i])[iu].mean() for i in range(n)]
    return float(np.clip(np.mean(sims), -1.0, 1.0))


def dedup_pool(pool: Manifest, references: Sequence[Manifest] | Manifest, config: DedupConfig | None = None):
    """Drop web samples with a frame too similar to any reference frame.

    Returns ``(clean pool, report)``.  A sample is flagged when its best frame
    similarity reaches the threshold; the report lists every (web, reference)
    pair at or above it, in pool order then reference order.
    """
    config = config or DedupConfig()
    if isinstance(references, Manifest):
        references = [references]
    refs = [s for m in references for s in m]
    if not refs or not len(pool):
        th = config.threshold_override if config.threshold_override is not None else 1.0
        return pool, DedupReport(float(th))
    web_rows, web_owner = _frame_rows(pool.samples, config.grid)
    ref_rows, ref_owner = _frame_rows(refs, config.grid)
    W = np.asarray(web_rows)
    R = np.asarray(ref_rows)
    if W.shape[1] != R.shape[1]:
        raise DimensionError(f"pool features have {W.shape[1]} dims, references {R.shape[1]}")
    transform = None
    if config.whiten:
        fit_rows = np.vstack([R, W]) if config.fit_on == "union" else R
        transform = fit_whitening(fit_rows, config.ridge)
        W = transform.apply(W)
        R = transform.apply(R)
    if config.threshold_override is not None:
        th = float(config.threshold_override)
    else:
        ref_frames = [f for s in refs for f in s.frames]
        if not ref_frames:
            raise ValueError("an automatic threshold needs reference frames; set threshold_override")
        step = max(1, len(ref_frames) // config.max_threshold_frames)
        th = derive_threshold(ref_frames[::step][: config.max_threshold_frames], config, transform)
    S = cosine_matrix(W, R)
    # reduce frame-level similarities to sample pairs by max
    n_web = len(pool)
    best = _group_max(_group_max(S, web_owner, 0), ref_owner, 1)
    pairs, flagged, keep = [], [], []
    for i, s in enumerate(pool.samples):
        hits = np.nonzero(best[i] >= th)[0]
        if hits.size:
            flagged.append(s.id)
            pairs.extend((s.id, refs[j].id, float(best[i, j])) for j in hits)
        else:
            keep.append(s)
    log.info("dedup: threshold %.4f, %d of %d flagged", th, len(flagged), n_web)
    return pool.with_samples(keep), DedupReport(th, pairs, flagged)
