"""Turning still images into pseudo clips by chains of homographies.

Homographies live in normalised image coordinates: pixel centres span
[-1, 1] on both axes, so a fitted warp distribution does not depend on frame
resolution.  A clip is built as ``J_1 = I`` and ``J_i = H_i(J_{i-1})``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .core import Sample, as_frame

MODES = ("replicate", "translate-random", "translate-constant", "warp")
FILL_POLICIES = {"constant": _kernels.FILL_CONSTANT, "edge": _kernels.FILL_EDGE}
SINGULAR_DET = 1e-12


class DegenerateWarpModel(RuntimeError):
    """Sampling kept producing unusable homographies."""


def _normaliser(width: int, height: int) -> np.ndarray:
    sx = 2.0 / (width - 1) if width > 1 else 1.0
    sy = 2.0 / (height - 1) if height > 1 else 1.0
    return np.array([[sx, 0.0, -1.0 if width > 1 else 0.0], [0.0, sy, -1.0 if height > 1 else 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)) or m[2, 2] == 0.0:
            raise ValueError("homography must be finite with non-zero h33")
        if m[2, 2] != 1.0:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= SINGULAR_DET:
            raise ValueError("homography matrix is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def params(self) -> np.ndarray:
        return self.matrix.ravel()[:8].copy()

    @classmethod
    def from_params(cls, params) -> "Homography":
        p = np.asarray(params, dtype=np.float64).ravel()
        if p.size != 8:
            raise ValueError("homography parameter vector has 8 entries")
        return cls(np.append(p, 1.0).reshape(3, 3))

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float, width: int, height: int) -> "Homography":
        """Shift by (tx, ty) pixels on a ``width`` x ``height`` frame."""
        t = np.eye(3)
        t[0, 2], t[1, 2] = tx, ty
        return cls.from_pixel(t, width, height)

    @classmethod
    def from_pixel(cls, matrix, width: int, height: int) -> "Homography":
        n = _normaliser(width, height)
        return cls(n @ np.asarray(matrix, dtype=np.float64) @ np.linalg.inv(n))

    def to_pixel(self, width: int, height: int) -> np.ndarray:
        n = _normaliser(width, height)
        return np.linalg.inv(n) @ self.matrix @ n

    def then(self, other: "Homography") -> "Homography":
        """Apply ``self`` first, then ``other``."""
        return Homography(other.matrix @ self.matrix)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def corners_within(self, bound: float = 2.0) -> bool:
        c = np.array([[-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=np.float64)
        q = c @ self.matrix.T
        if np.any(q[:, 2] <= 1e-12):
            return False
        xy = q[:, :2] / q[:, 2:]
        return bool(np.all(np.abs(xy) <= bound))

    def __eq__(self, other):
        if not isinstance(other, Homography):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)

    __hash__ = None


def compose(chain: Sequence[Homography]) -> Homography:
    """``H_n ... H_1`` for a chain applied first-to-last."""
    m = np.eye(3)
    for h in chain:
        m = h.matrix @ m
    return Homography(m)


def apply_homography(frame, h: Homography, fill: str = "edge", fill_value: float = 0.0) -> np.ndarray:
    """Warp one frame by ``h`` with bilinear inverse mapping."""
    img = as_frame(frame)
    if fill not in FILL_POLICIES:
        raise ValueError(f"unknown fill policy {fill!r}")
    if not 0.0 <= fill_value <= 1.0:
        raise ValueError("fill_value must be within [0, 1]")
    if np.array_equal(h.matrix, np.eye(3)):
        return img
    height, width = img.shape[:2]
    hinv = h.inverse().to_pixel(width, height)
    out = _kernels.warp_bilinear(img, hinv, FILL_POLICIES[fill], fill_value)
    return as_frame(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Gaussian warp model


@dataclass(frozen=True, eq=False)
class WarpModel:
    mu: np.ndarray
    sigma: np.ndarray
    scope: str = "class-agnostic"
    class_index: int | None = None

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(8)
        sigma = np.array(self.sigma, dtype=np.float64).reshape(8, 8)
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        if np.linalg.eigvalsh(sigma).min() < -1e-10:
            raise ValueError("sigma must be positive semi-definite")
        if self.scope not in ("class-agnostic", "class-specific"):
            raise ValueError(f"unknown scope {self.scope!r}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.ravel().tolist(),
            "scope": self.scope,
            "class_index": self.class_index,
        }

    @classmethod
    def from_dict(cls, d) -> "WarpModel":
        return cls(d["mu"], np.asarray(d["sigma"]).reshape(8, 8), d.get("scope", "class-agnostic"), d.get("class_index"))


def save_warp_model(model: WarpModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n")


def load_warp_model(path) -> WarpModel:
    return WarpModel.from_dict(json.loads(Path(path).read_text()))


def fit_warp_model(
    sequences: Sequence[Sequence[Homography]],
    scope: str = "class-agnostic",
    classes: Sequence[int] | None = None,
    class_index: int | None = None,
) -> WarpModel:
    """Maximum-likelihood Gaussian over the 8 homography parameters.

    ``sequences`` holds one homography list per source video.  For the
    class-specific scope, ``classes[v]`` gives video ``v``'s class and only
    videos of ``class_index`` are pooled.
    """
    if scope == "class-specific":
        if classes is None or class_index is None:
            raise ValueError("class-specific fitting needs per-video classes and a class_index")
        sequences = [seq for seq, c in zip(sequences, classes) if c == class_index]
    vecs = [h.params for seq in sequences for h in seq]
    if len(vecs) < 2:
        raise ValueError("need at least 2 homographies to fit a warp model")
    P = np.asarray(vecs)
    # shifting by the first row keeps identical inputs exact (mu = h, sigma = 0)
    mu = P[0] + (P - P[0]).mean(axis=0)
    D = P - mu
    sigma = D.T @ D / P.shape[0]
    sigma = 0.5 * (sigma + sigma.T)
    return WarpModel(mu, sigma, scope, class_index if scope == "class-specific" else None)


def sample_homography(model: WarpModel, rng: np.random.Generator, max_tries: int = 100) -> Homography:
    """Draw from N(mu, sigma), rejecting singular or wildly distorting warps."""
    lam, vecs = np.linalg.eigh(model.sigma)
    scale = np.sqrt(np.clip(lam, 0.0, None))
    for _ in range(max_tries):
        z = rng.standard_normal(8)
        p = model.mu + vecs @ (scale * z)
        m = np.append(p, 1.0).reshape(3, 3)
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) <= SINGULAR_DET:
            continue
        h = Homography(m)
        if h.corners_within(2.0):
            return h
    raise DegenerateWarpModel(f"{max_tries} consecutive rejected draws; warp model is degenerate")


# ---------------------------------------------------------------------------
# image -> clip


@dataclass(frozen=True)
class InflateConfig:
    mode: str = "warp"
    clip_len: int = 4
    speed: tuple = (1.0, 0.0)
    translate_range: float = 2.0
    fill: str = "edge"
    warp_model: WarpModel | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown inflate mode {self.mode!r}")
        if self.clip_len < 1:
            raise ValueError("clip_len must be >= 1")
        if self.fill not in FILL_POLICIES:
            raise ValueError(f"unknown fill policy {self.fill!r}")
        if self.mode == "warp" and self.warp_model is None:
            raise ValueError("warp mode needs a warp model")


def step_homographies(config: InflateConfig, width: int, height: int, rng: np.random.Generator):
    """The N-1 per-step transforms H_2..H_N for one clip."""
    steps = []
    for _ in range(config.clip_len - 1):
        if config.mode == "translate-constant":
            steps.append(Homography.translation(config.speed[0], config.speed[1], width, height))
        elif config.mode == "translate-random":
            tx, ty = rng.uniform(-config.translate_range, config.translate_range, size=2)
            steps.append(Homography.translation(tx, ty, width, height))
        elif config.mode == "warp":
            steps.append(sample_homography(config.warp_model, rng))
    return steps


def inflate_image(sample: Sample, config: InflateConfig, rng: np.random.Generator) -> Sample:
    if sample.source_kind != "image":
        raise ValueError(f"inflate_image expects an image sample, got {sample.source_kind}")
    first = sample.frames[0]
    frames = [first]
    if config.mode == "replicate":
        frames = [first] * config.clip_len
    else:
        height, width = first.shape[:2]
        for h in step_homographies(config, width, height, rng):
            frames.append(apply_homography(frames[-1], h, config.fill))
    return Sample(
        id=f"{sample.id}#inflate",
        source_kind="trimmed",
        frames=tuple(frames),
        fps=sample.fps,
        label=sample.label,
        pseudo_label=sample.pseudo_label,
        confidence=sample.confidence,
    )
