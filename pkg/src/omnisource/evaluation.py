"""Accuracy, confusion matrices and pairwise confusion scores."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Manifest
from .teacher import ClassifierModel, proba_matrix, sample_features
from .trainer import top_k_from_proba


def _labels(manifest: Manifest) -> np.ndarray:
    for s in manifest:
        if s.label is None:
            raise ValueError(f"sample {s.id} has no ground-truth label")
    return np.array([s.label for s in manifest], dtype=np.int64)


def _proba(model: ClassifierModel, manifest: Manifest) -> np.ndarray:
    if not len(manifest):
        return np.zeros((0, model.K))
    X = np.array([sample_features(model, s) for s in manifest])
    return proba_matrix(model, X)


def top_k_accuracy(model: ClassifierModel, manifest: Manifest, k: int = 1) -> float:
    if not 1 <= k <= model.K:
        raise ValueError(f"k must be within [1, {model.K}]")
    y = _labels(manifest)
    return top_k_from_proba(_proba(model, manifest), y, k)


def confusion_from_predictions(y_true, y_pred, K: int) -> np.ndarray:
    """n[i, j] = samples of true class i predicted as j."""
    n = np.zeros((K, K), dtype=np.int64)
    np.add.at(n, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return n


def confusion_matrix(model: ClassifierModel, manifest: Manifest) -> np.ndarray:
    y = _labels(manifest)
    pred = np.argmax(_proba(model, manifest), axis=1)
    return confusion_from_predictions(y, pred, model.K)


def accuracy_from_matrix(n) -> float:
    n = np.asarray(n)
    total = n.sum()
    return float(np.trace(n) / total) if total else 0.0


def confusion_score(n, i: int, j: int) -> float | None:
    """(n_ij + n_ji) / (n_ij + n_ji + n_ii + n_jj); None when the denominator is 0."""
    n = np.asarray(n)
    off = int(n[i, j]) + int(n[j, i])
    den = off + int(n[i, i]) + int(n[j, j])
    if den == 0:
        return None
    return off / den


def pair_scores(n) -> list[tuple[int, int, float]]:
    """Every defined s_ij with i < j."""
    K = np.asarray(n).shape[0]
    out = []
    for i in range(K):
        for j in range(i + 1, K):
            s = confusion_score(n, i, j)
            if s is not None:
                out.append((i, j, s))
    return out


@dataclass
class ConfusionReport:
    pairs: list
    omni_model: str = "omni"
    base_model: str = "baseline"
    top: int = 5
    lowest: int = 2
    deltas: list = field(default_factory=list)

    @property
    def most_improved(self) -> list:
        return self.deltas[: self.top]

    @property
    def most_regressed(self) -> list:
        return self.deltas[::-1][: self.lowest]

    def to_dict(self) -> dict:
        row = lambda t: {"i": t[0], "j": t[1], "delta": t[2]}  # noqa: E731
        return {
            "omni_model": self.omni_model,
            "base_model": self.base_model,
            "deltas": [row(t) for t in self.deltas],
            "most_improved": [row(t) for t in self.most_improved],
            "most_regressed": [row(t) for t in self.most_regressed],
        }


def confusion_delta(matrix_omni, matrix_base, omni_model: str = "omni", base_model: str = "baseline") -> ConfusionReport:
    """Delta_ij = s_ij(omni) - s_ij(base) over pairs defined in both; sorted ascending."""
    a = np.asarray(matrix_omni)
    b = np.asarray(matrix_base)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"confusion matrices disagree on K: {a.shape} vs {b.shape}")
    so = {(i, j): s for i, j, s in pair_scores(a)}
    sb = {(i, j): s for i, j, s in pair_scores(b)}
    deltas = [(i, j, so[(i, j)] - sb[(i, j)]) for (i, j) in so if (i, j) in sb]
    deltas.sort(key=lambda t: (t[2], t[0], t[1]))
    return ConfusionReport(pairs=sorted(so.items()), omni_model=omni_model, base_model=base_model, deltas=deltas)


def evaluation_report(model: ClassifierModel, manifest: Manifest, baseline: ClassifierModel | None = None) -> dict:
    n = confusion_matrix(model, manifest)
    rep = {
        "n_samples": len(manifest),
        "top1": top_k_accuracy(model, manifest, 1),
        "top5": top_k_accuracy(model, manifest, min(5, model.K)),
        "confusion_matrix": n.tolist(),
        "pair_scores": [{"i": i, "j": j, "score": s} for i, j, s in pair_scores(n)],
    }
    if baseline is not None:
        nb = confusion_matrix(baseline, manifest)
        rep["baseline_top1"] = top_k_accuracy(baseline, manifest, 1)
        rep["baseline_top5"] = top_k_accuracy(baseline, manifest, min(5, baseline.K))
        rep["baseline_confusion_matrix"] = nb.tolist()
        rep["confusion_delta"] = confusion_delta(n, nb).to_dict()
    return rep


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
