"""Joint student training on target and auxiliary batches, with optional mixup."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core import FeaturizerConfig, Manifest, make_rng
from .sampler import ResampleStrategy, schedule
from .teacher import (
    ClassifierModel,
    OptimizerConfig,
    _view,
    as_targets,
    check_finite,
    check_params,
    init_model,
    loss_and_grad,
    lr_at,
    proba_matrix,
    sgd_step,
)


@dataclass(frozen=True)
class MixupConfig:
    enabled: bool = False
    scope: str = "cross"
    alpha: float = 0.2

    def __post_init__(self):
        if self.scope not in ("intra", "cross"):
            raise ValueError("mixup scope is 'intra' or 'cross'")
        if not self.alpha > 0:
            raise ValueError("mixup alpha must be > 0")


@dataclass(frozen=True)
class SamplerConfig:
    ratio: str = "2:1"
    batch_target: int = 32
    resample: ResampleStrategy = field(default_factory=ResampleStrategy)


@dataclass
class TrainRecord:
    epoch: int
    target_loss: float
    auxiliary_loss: float
    total_loss: float
    lr: float
    val_top1: float | None = None
    val_top5: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def joint_loss(model: ClassifierModel, target_batch, auxiliary_batch=None):
    """Sum of target and auxiliary cross-entropies and the summed gradients.

    Each batch is ``(X, y)`` with ``y`` as class indices or soft label rows;
    ``auxiliary_batch`` may be None or empty.  Returns
    ``(loss, grads, target_loss, auxiliary_loss)``.
    """
    Xt, yt = target_batch
    t_loss, grads = loss_and_grad(model, Xt, yt)
    a_loss = 0.0
    if auxiliary_batch is not None and len(auxiliary_batch[0]):
        a_loss, a_grads = loss_and_grad(model, *auxiliary_batch)
        grads = [g + h for g, h in zip(grads, a_grads)]
    return t_loss + a_loss, grads, t_loss, a_loss


def mixup_pair(feature_a, feature_b, label_a, label_b, lam: float, K: int):
    """Convex combination of two (feature, label) pairs.

    Labels may be class indices or soft vectors of length ``K``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be within [0, 1]")
    fa = np.asarray(feature_a, dtype=np.float64)
    fb = np.asarray(feature_b, dtype=np.float64)
    if fa.shape != fb.shape:
        raise ValueError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
    ya = _label_row(label_a, K)
    yb = _label_row(label_b, K)
    return lam * fa + (1.0 - lam) * fb, lam * ya + (1.0 - lam) * yb


def _label_row(label, K):
    arr = np.asarray(label)
    if arr.ndim == 0:
        return as_targets(arr.reshape(1), K)[0]
    if arr.shape != (K,):
        raise ValueError(f"soft label must have length {K}")
    return arr.astype(np.float64)


def mix_batch(Xt, Yt, Xa, Ya, mixup: MixupConfig, rng: np.random.Generator):
    """Apply intra- or cross-dataset mixup to one iteration's batches.

    Returns the (possibly mixed) target block, the auxiliary block that still
    trains unmixed, and the drawn lambdas.
    """
    n = Xt.shape[0]
    lam = rng.beta(mixup.alpha, mixup.alpha, size=n)
    lcol = lam[:, None]
    if mixup.scope == "intra":
        partner = rng.permutation(n)
        return lcol * Xt + (1 - lcol) * Xt[partner], lcol * Yt + (1 - lcol) * Yt[partner], Xa, Ya, lam
    if Xa.shape[0] == 0:
        return Xt, Yt, Xa, Ya, np.ones(0)
    partner = rng.integers(0, Xa.shape[0], size=n)
    Xm = lcol * Xt + (1 - lcol) * Xa[partner]
    Ym = lcol * Yt + (1 - lcol) * Ya[partner]
    leftover = np.setdiff1d(np.arange(Xa.shape[0]), partner)
    return Xm, Ym, Xa[leftover], Ya[leftover], lam


def top_k_from_proba(P: np.ndarray, y: np.ndarray, k: int) -> float:
    if len(y) == 0:
        return 0.0
    # stable sort on -p keeps the lowest index first among ties
    order = np.argsort(-P, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == y[:, None], axis=1)))


def train_student(
    target: Manifest,
    auxiliary: Manifest | None,
    optimizer: OptimizerConfig,
    sampler: SamplerConfig | None = None,
    mixup: MixupConfig | None = None,
    validation: Manifest | None = None,
    seed: int = 0,
    *,
    kind: str = "linear-softmax",
    hidden: int = 32,
    featurizer: FeaturizerConfig | None = None,
):
    """Train a student on target ∪ auxiliary; returns ``(model, records)``.

    Batch size comes from ``sampler.batch_target``; ``optimizer.batch_size``
    is ignored here so the per-sample LR scales with the target batch.
    """
    sampler = sampler or SamplerConfig(batch_target=optimizer.batch_size)
    mixup = mixup or MixupConfig()
    if sampler.batch_target != optimizer.batch_size:
        optimizer = replace(optimizer, batch_size=sampler.batch_target)
    K = target.label_space.K
    Xt_all = target.feature_matrix()
    yt_all = as_targets(target.class_indices(), K)
    has_aux = auxiliary is not None and len(auxiliary) > 0
    if has_aux:
        if auxiliary.label_space.K != K:
            raise ValueError("auxiliary label space differs from target")
        Xa_all = auxiliary.feature_matrix()
        ya_all = as_targets(auxiliary.class_indices(), K)
        if Xa_all.shape[1] != Xt_all.shape[1]:
            raise ValueError("auxiliary features have different dimensionality")
    else:
        Xa_all = np.zeros((0, Xt_all.shape[1]))
        ya_all = np.zeros((0, K))
    if validation is not None:
        Xv = validation.feature_matrix()
        yv = validation.class_indices()

    model = init_model(kind, Xt_all.shape[1], K, seed, hidden, featurizer)
    params = [p.copy() for p in model.params]
    velocity = [np.zeros_like(p) for p in params]
    n = Xt_all.shape[0]
    iters = max(1, math.ceil(n / sampler.batch_target))
    mix_rng = make_rng(seed, "mixup")
    records = []
    plans = schedule(
        target, auxiliary if has_aux else None, sampler.ratio, sampler.batch_target,
        sampler.resample, seed, epochs=optimizer.epochs,
    )
    sums = [0.0, 0.0]
    lr = 0.0
    for plan in plans:
        it = plan.iteration - plan.epoch * iters
        Xt, Yt = Xt_all[plan.target], yt_all[plan.target]
        Xa, Ya = Xa_all[plan.auxiliary], ya_all[plan.auxiliary]
        if mixup.enabled:
            Xt, Yt, Xa, Ya, _ = mix_batch(Xt, Yt, Xa, Ya, mixup, mix_rng)
        loss, grads, t_loss, a_loss = joint_loss(_view(model, params), (Xt, Yt), (Xa, Ya))
        check_finite(loss, f"epoch {plan.epoch} iteration {it}")
        sums[0] += t_loss
        sums[1] += a_loss
        lr = lr_at(optimizer, plan.epoch + it / iters)
        nt = max(plan.target.size, 1)
        sgd_step(params, velocity, [g / nt for g in grads], lr, optimizer)
        if it == iters - 1:
            check_params(params, f"epoch {plan.epoch}")
            rec = TrainRecord(
                epoch=plan.epoch,
                target_loss=sums[0] / n,
                auxiliary_loss=sums[1] / n,
                total_loss=sums[0] / n + sums[1] / n,
                lr=lr,
            )
            if validation is not None and len(validation):
                P = proba_matrix(_view(model, params), Xv)
                rec.val_top1 = top_k_from_proba(P, yv, 1)
                rec.val_top5 = top_k_from_proba(P, yv, min(5, K))
            records.append(rec)
            sums = [0.0, 0.0]
    return model.with_params(params), records
