"""Class rebalancing for auxiliary data and the joint target/auxiliary batch plan."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

from .core import Manifest, epoch_order, make_rng


@dataclass(frozen=True)
class ResampleStrategy:
    """``none``, ``clipped`` (cap each class at ``n_c``) or ``power`` (``N ** p``)."""

    kind: str = "power"
    p: float = 0.2
    n_c: int = 5000

    def __post_init__(self):
        if self.kind not in ("none", "clipped", "power"):
            raise ValueError(f"unknown resample kind {self.kind!r}")
        if self.kind == "power" and not 0.0 < self.p <= 1.0:
            raise ValueError("power exponent p must be in (0, 1]")
        if self.kind == "clipped" and self.n_c < 1:
            raise ValueError("n_c must be >= 1")


def class_weights(counts, strategy: ResampleStrategy) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise ValueError("counts must be a 1-d array of non-negative numbers")
    if not np.any(counts > 0):
        raise ValueError("at least one class must have a positive count")
    if strategy.kind == "none":
        w = counts
    elif strategy.kind == "clipped":
        w = np.minimum(counts, strategy.n_c)
    else:
        w = np.zeros_like(counts)
        pos = counts > 0
        w[pos] = counts[pos] ** strategy.p
    return w / w.sum()


def _class_buckets(manifest: Manifest):
    """Per-class index lists ordered by sample id, so draws ignore storage order."""
    k = manifest.label_space.K
    buckets = [[] for _ in range(k)]
    for i, s in enumerate(manifest.samples):
        if s.pseudo_label is None and s.label is None:
            raise ValueError(f"sample {s.id} has no pseudo-label")
        buckets[s.target_class].append((s.id, i))
    return [np.array([i for _, i in sorted(b)], dtype=np.int64) for b in buckets]


class AuxiliaryDrawer:
    """Two-stage draw: class from ``class_weights``, then uniform within the class."""

    def __init__(self, manifest: Manifest, strategy: ResampleStrategy):
        if len(manifest) == 0:
            raise ValueError("cannot draw from an empty auxiliary manifest")
        self.buckets = _class_buckets(manifest)
        self.weights = class_weights([len(b) for b in self.buckets], strategy)
        self._cdf = np.cumsum(self.weights)
        self._cdf[-1] = 1.0

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random(n)
        classes = np.searchsorted(self._cdf, u, side="right")
        classes = np.minimum(classes, len(self.buckets) - 1)
        v = rng.random(n)
        out = np.empty(n, dtype=np.int64)
        for j, (c, r) in enumerate(zip(classes, v)):
            bucket = self.buckets[c]
            out[j] = bucket[min(int(r * len(bucket)), len(bucket) - 1)]
        return out


def draw_auxiliary(manifest: Manifest, strategy: ResampleStrategy, n: int, rng: np.random.Generator) -> np.ndarray:
    return AuxiliaryDrawer(manifest, strategy).draw(n, rng)


@dataclass(frozen=True)
class BatchPlan:
    iteration: int
    epoch: int
    target: np.ndarray
    auxiliary: np.ndarray


def parse_ratio(ratio) -> Fraction:
    """``"2:1"``, ``(2, 1)`` or a number -> |B_T| / |B_A| as a Fraction."""
    if isinstance(ratio, str):
        a, _, b = ratio.partition(":")
        return Fraction(int(a), int(b or 1))
    if isinstance(ratio, (tuple, list)):
        return Fraction(int(ratio[0]), int(ratio[1]))
    return Fraction(ratio).limit_denominator(1000)


def auxiliary_size(n_target: int, ratio) -> int:
    r = parse_ratio(ratio)
    return math.floor(n_target / r)


def schedule(
    target: Manifest,
    auxiliary: Manifest | None,
    ratio,
    batch_target: int,
    strategy: ResampleStrategy,
    seed: int,
    epochs: int = 1,
) -> Iterator[BatchPlan]:
    """Yield one ``BatchPlan`` per iteration, ``epochs`` passes over ``target``.

    Target order uses the same seeded permutation as supervised teacher
    training, so an empty auxiliary set reproduces that baseline exactly.
    """
    n = len(target)
    if n == 0:
        raise ValueError("target manifest is empty")
    r = parse_ratio(ratio)
    if r <= 0:
        raise ValueError("ratio must be positive")
    full_aux = batch_target / r
    drawer = AuxiliaryDrawer(auxiliary, strategy) if auxiliary is not None and len(auxiliary) else None
    if drawer is not None and full_aux.denominator != 1:
        raise ValueError(f"batch_target {batch_target} not divisible by ratio {r}")
    iters = math.ceil(n / batch_target)
    it_global = 0
    for epoch in range(epochs):
        order = epoch_order(n, seed, epoch)
        rng = make_rng(seed, "aux-draw", epoch)
        for it in range(iters):
            idx = order[it * batch_target : (it + 1) * batch_target]
            if drawer is None:
                aux = np.zeros(0, dtype=np.int64)
            else:
                m = int(full_aux) if idx.size == batch_target else max(1, math.floor(idx.size / r))
                aux = drawer.draw(m, rng)
            yield BatchPlan(it_global, epoch, idx, aux)
            it_global += 1
