"""Softmax classifiers trained by mini-batch SGD with momentum.

The same model type serves as the filtering teacher and as the jointly
trained student.  Learning rates follow a per-sample convention: the step
size at full schedule is ``lr_per_sample * batch_size`` applied to the
batch-mean gradient.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    DimensionError,
    FeaturizerConfig,
    Manifest,
    Sample,
    epoch_order,
    featurize,
    make_rng,
)

MODEL_KINDS = ("linear-softmax", "mlp-1hidden")
MODEL_MAGIC = b"OMDL"


class TrainingError(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    kind: str
    input_dims: int
    K: int
    params: tuple
    hidden: int = 0
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.K < 2:
            raise ValueError("a classifier needs K >= 2")
        params = tuple(np.array(p, dtype=np.float64) for p in self.params)
        expected = param_shapes(self.kind, self.input_dims, self.K, self.hidden)
        if [p.shape for p in params] != expected:
            raise ValueError(f"parameter shapes {[p.shape for p in params]} != {expected}")
        if not all(np.all(np.isfinite(p)) for p in params):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "params", params)

    @property
    def consensus(self) -> str:
        return self.featurizer.consensus

    def with_params(self, params) -> "ClassifierModel":
        return replace(self, params=tuple(params))

    def equals(self, other: "ClassifierModel") -> bool:
        return (
            self.kind == other.kind
            and self.input_dims == other.input_dims
            and self.K == other.K
            and self.hidden == other.hidden
            and self.featurizer == other.featurizer
            and all(np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )


def param_shapes(kind, d, k, hidden):
    if kind == "linear-softmax":
        return [(k, d), (k,)]
    return [(hidden, d), (hidden,), (k, hidden), (k,)]


def init_model(
    kind: str,
    input_dims: int,
    K: int,
    seed: int,
    hidden: int = 32,
    featurizer: FeaturizerConfig | None = None,
) -> ClassifierModel:
    featurizer = featurizer or FeaturizerConfig()
    if kind == "linear-softmax":
        params = [np.zeros((K, input_dims)), np.zeros(K)]
        hidden = 0
    elif kind == "mlp-1hidden":
        rng = make_rng(seed, "model-init")
        b1 = 1.0 / math.sqrt(input_dims)
        b2 = 1.0 / math.sqrt(hidden)
        params = [
            rng.uniform(-b1, b1, size=(hidden, input_dims)),
            np.zeros(hidden),
            rng.uniform(-b2, b2, size=(K, hidden)),
            np.zeros(K),
        ]
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return ClassifierModel(kind, input_dims, K, tuple(params), hidden, featurizer)


# ---------------------------------------------------------------------------
# forward / backward


def _forward(model, X):
    if model.kind == "linear-softmax":
        W, b = model.params
        return X @ W.T + b, None
    W1, b1, W2, b2 = model.params
    h = np.tanh(X @ W1.T + b1)
    return h @ W2.T + b2, h


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def as_targets(y, K: int) -> np.ndarray:
    """Integer class indices or soft label rows -> (n, K) label matrix."""
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != K:
            raise ValueError(f"soft labels have {y.shape[1]} columns, expected {K}")
        return y.astype(np.float64)
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"label index outside [0, {K})")
    out = np.zeros((y.size, K))
    out[np.arange(y.size), y] = 1.0
    return out


def loss_and_grad(model: ClassifierModel, X, y):
    """Summed cross-entropy over the rows of ``X`` and its parameter gradients.

    ``y`` holds class indices or soft label rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dims:
        raise DimensionError(f"inputs have shape {X.shape}, model expects (*, {model.input_dims})")
    Y = as_targets(y, model.K)
    if Y.shape[0] != X.shape[0]:
        raise ValueError("inputs and labels differ in length")
    z, h = _forward(model, X)
    logp = log_softmax(z)
    loss = float(-(Y * logp).sum())
    # d/dz of -sum(y log softmax(z)) is softmax(z) * sum(y) - y
    dz = np.exp(logp) * Y.sum(axis=1, keepdims=True) - Y
    if model.kind == "linear-softmax":
        return loss, [dz.T @ X, dz.sum(axis=0)]
    W1, b1, W2, b2 = model.params
    dh = (dz @ W2) * (1.0 - h * h)
    return loss, [dh.T @ X, dh.sum(axis=0), dz.T @ h, dz.sum(axis=0)]


def proba_matrix(model: ClassifierModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dims:
        raise DimensionError(f"feature has {X.shape[1]} dims, model expects {model.input_dims}")
    z, _ = _forward(model, X)
    return softmax(z)


def sample_features(model: ClassifierModel, sample: Sample) -> np.ndarray:
    if sample.feature is not None:
        return np.asarray(sample.feature, dtype=np.float64)
    return featurize(sample, model.featurizer).astype(np.float64)


def predict_proba(model: ClassifierModel, sample: Sample) -> np.ndarray:
    return proba_matrix(model, sample_features(model, sample))[0]


def ensemble_proba_matrix(models: Sequence[ClassifierModel], X) -> np.ndarray:
    if not models:
        raise ValueError("an ensemble needs at least one model")
    ks = {m.K for m in models}
    if len(ks) != 1:
        raise ValueError(f"ensemble members disagree on K: {sorted(ks)}")
    acc = proba_matrix(models[0], X)
    for m in models[1:]:
        acc = acc + proba_matrix(m, X)
    return acc / len(models)


def ensemble_proba(models: Sequence[ClassifierModel], sample: Sample) -> np.ndarray:
    """Mean of member probability vectors; each member featurizes on its own terms."""
    if not models:
        raise ValueError("an ensemble needs at least one model")
    ks = {m.K for m in models}
    if len(ks) != 1:
        raise ValueError(f"ensemble members disagree on K: {sorted(ks)}")
    acc = predict_proba(models[0], sample)
    for m in models[1:]:
        acc = acc + predict_proba(m, sample)
    return acc / len(models)


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index (numpy's behaviour)."""
    return np.argmax(p, axis=-1)


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class OptimizerConfig:
    lr_per_sample: float = 4e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    milestones: tuple = ()
    factor: float = 0.1
    warmup_epochs: int = 0
    epochs: int = 20
    batch_size: int = 32

    def __post_init__(self):
        if not self.lr_per_sample > 0:
            raise ValueError("lr_per_sample must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.schedule not in ("step", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not 0.0 < self.factor < 1.0:
            raise ValueError("step factor must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ValueError("warmup_epochs must be < epochs")
        object.__setattr__(self, "milestones", tuple(self.milestones))

    @property
    def base_lr(self) -> float:
        return self.lr_per_sample * self.batch_size


def lr_at(config: OptimizerConfig, t: float) -> float:
    """Learning rate at fractional epoch ``t``."""
    base = config.base_lr
    w = config.warmup_epochs
    if w > 0 and t < w:
        return base * t / w
    if config.schedule == "step":
        return base * config.factor ** sum(1 for m in config.milestones if t >= m)
    span = max(config.epochs - w, 1e-12)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(max(t - w, 0.0), span) / span))


def sgd_step(params, velocity, grads, lr: float, config: OptimizerConfig):
    """In-place heavy-ball SGD step with decoupled-into-gradient weight decay."""
    for p, v, g in zip(params, velocity, grads):
        g = g + config.weight_decay * p
        v *= config.momentum
        v += g
        p -= lr * v


def check_finite(loss: float, where: str) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at {where}")


def check_params(params, where: str) -> None:
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingError(f"non-finite parameters after {where}")


def train_classifier(
    train: Manifest,
    config: OptimizerConfig,
    seed: int,
    *,
    kind: str = "linear-softmax",
    hidden: int = 32,
    featurizer: FeaturizerConfig | None = None,
):
    """Supervised training on a labeled, featurized manifest.

    Returns ``(model, epoch_losses)`` where ``epoch_losses[e]`` is the mean
    per-sample cross-entropy observed during epoch ``e``.
    """
    if train.role not in ("target", "validation"):
        raise ValueError(f"teacher training expects a target manifest, got role {train.role!r}")
    if train.label_space.K < 2:
        raise ValueError("need K >= 2")
    X = train.feature_matrix()
    y = train.class_indices()
    model = init_model(kind, X.shape[1], train.label_space.K, seed, hidden, featurizer)
    params = [p.copy() for p in model.params]
    velocity = [np.zeros_like(p) for p in params]
    n = X.shape[0]
    bs = config.batch_size
    iters = max(1, math.ceil(n / bs))
    history = []
    for epoch in range(config.epochs):
        order = epoch_order(n, seed, epoch)
        total = 0.0
        for it in range(iters):
            idx = order[it * bs : (it + 1) * bs]
            if idx.size == 0:
                continue
            loss, grads = loss_and_grad(_view(model, params), X[idx], y[idx])
            check_finite(loss, f"epoch {epoch} batch {it}")
            total += loss
            grads = [g / idx.size for g in grads]
            sgd_step(params, velocity, grads, lr_at(config, epoch + it / iters), config)
        history.append(total / max(n, 1))
        check_params(params, f"epoch {epoch}")
    return model.with_params(params), history


def _view(model: ClassifierModel, params) -> ClassifierModel:
    """Cheap model view over live parameter arrays (skips validation)."""
    obj = object.__new__(ClassifierModel)
    for name in ("kind", "input_dims", "K", "hidden", "featurizer"):
        object.__setattr__(obj, name, getattr(model, name))
    object.__setattr__(obj, "params", tuple(params))
    return obj


# ---------------------------------------------------------------------------
# model file: "OMDL", u32 version, u8 kind, u8 consensus, u16 stack_k,
# u32 grid, u32 input_dims, u32 hidden, u32 K, then float64 LE parameters


def save_model(model: ClassifierModel, path) -> None:
    header = MODEL_MAGIC + struct.pack(
        "<IBBHIIII",
        1,
        MODEL_KINDS.index(model.kind),
        0 if model.featurizer.consensus == "segment-average" else 1,
        model.featurizer.stack_k,
        model.featurizer.grid,
        model.input_dims,
        model.hidden,
        model.K,
    )
    body = b"".join(np.asarray(p, dtype="<f8").tobytes(order="C") for p in model.params)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + body)


def load_model(path) -> ClassifierModel:
    data = Path(path).read_bytes()
    hsize = 4 + struct.calcsize("<IBBHIIII")
    if len(data) < hsize or data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an OMDL model file")
    version, kind, cons, stack_k, grid, d, hidden, k = struct.unpack("<IBBHIIII", data[4:hsize])
    if version != 1:
        raise ValueError(f"{path}: unsupported model version {version}")
    kind_name = MODEL_KINDS[kind]
    shapes = param_shapes(kind_name, d, k, hidden)
    flat = np.frombuffer(data, dtype="<f8", offset=hsize)
    if flat.size != sum(int(np.prod(s)) for s in shapes):
        raise ValueError(f"{path}: parameter block has wrong length")
    params, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        params.append(flat[pos : pos + n].reshape(s).astype(np.float64))
        pos += n
    featurizer = FeaturizerConfig(grid, ("segment-average", "stack-k")[cons], stack_k)
    return ClassifierModel(kind_name, d, k, tuple(params), hidden, featurizer)
