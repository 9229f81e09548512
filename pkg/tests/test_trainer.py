import math

import numpy as np
import pytest

from omnisource.core import LabelSpace, Manifest, Sample, make_rng
from omnisource.teacher import OptimizerConfig, as_targets, init_model, loss_and_grad, train_classifier
from omnisource.trainer import MixupConfig, SamplerConfig, joint_loss, mix_batch, mixup_pair, top_k_from_proba, train_student

from conftest import two_blob_target


def random_model(rng, kind="linear-softmax", d=5, K=3):
    m = init_model(kind, d, K, 0, hidden=4)
    return m.with_params([rng.normal(0, 0.7, p.shape) for p in m.params])


def scalar_ce(model, X, y):
    W, b = model.params
    total = 0.0
    for x, t in zip(X, y):
        z = [sum(W[k, j] * x[j] for j in range(len(x))) + b[k] for k in range(W.shape[0])]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[t]
    return total


def test_joint_loss_matches_scalar_loop(rng):
    m = random_model(rng)
    X, y = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)
    loss, *_ = joint_loss(m, (X, y))
    assert loss == pytest.approx(scalar_ce(m, X, y), abs=1e-10)


def test_empty_auxiliary_is_plain_target(rng):
    m = random_model(rng)
    X, y = rng.normal(size=(6, 5)), rng.integers(0, 3, 6)
    a = joint_loss(m, (X, y), None)
    b = joint_loss(m, (X, y), (np.zeros((0, 5)), np.zeros((0, 3))))
    assert a[0] == b[0] == loss_and_grad(m, X, y)[0]


def test_perfect_prediction_zero_loss():
    from omnisource.teacher import ClassifierModel

    W = np.array([[1e3, 0], [0, 1e3]])
    m = ClassifierModel("linear-softmax", 2, 2, (W, np.zeros(2)))
    loss, *_ = joint_loss(m, (np.eye(2), np.array([0, 1])), (np.eye(2), np.array([0, 1])))
    assert loss == pytest.approx(0.0, abs=1e-9)


def test_label_out_of_range(rng):
    with pytest.raises(ValueError):
        joint_loss(random_model(rng), (rng.normal(size=(2, 5)), np.array([0, 3])))


def test_additivity(rng):
    for _ in range(20):
        m = random_model(rng, kind=("linear-softmax", "mlp-1hidden")[rng.integers(2)])
        t = (rng.normal(size=(6, 5)), rng.integers(0, 3, 6))
        a = (rng.normal(size=(4, 5)), rng.dirichlet(np.ones(3), 4))
        full = joint_loss(m, t, a)
        assert abs(full[0] - (joint_loss(m, t)[0] + loss_and_grad(m, *a)[0])) <= 1e-12
        assert full[2] + full[3] == full[0]


def test_mixup_endpoints_and_symmetry(rng):
    fa, fb = rng.normal(size=5), rng.normal(size=5)
    f, y = mixup_pair(fa, fb, 0, 2, 1.0, 3)
    assert np.array_equal(f, fa) and y.tolist() == [1, 0, 0]
    _, y = mixup_pair(fa, fb, 0, 2, 0.5, 3)
    assert y.tolist() == [0.5, 0, 0.5]
    with pytest.raises(ValueError):
        mixup_pair(fa, rng.normal(size=4), 0, 1, 0.5, 3)
    with pytest.raises(ValueError):
        mixup_pair(fa, fb, 0, 1, 1.5, 3)


def test_ce_linear_in_label(rng):
    for _ in range(10):
        m = random_model(rng, "mlp-1hidden")
        fa, fb = rng.normal(size=5), rng.normal(size=5)
        lam = rng.random()
        f, y = mixup_pair(fa, fb, 1, 2, lam, 3)
        mixed = loss_and_grad(m, f[None], y[None])[0]
        want = lam * loss_and_grad(m, f[None], [1])[0] + (1 - lam) * loss_and_grad(m, f[None], [2])[0]
        assert mixed == pytest.approx(want, abs=1e-10)


def test_beta_mass_outside_centre():
    from scipy.stats import beta

    lam = make_rng(0, "mixup").beta(0.2, 0.2, size=10_000)
    frac = np.mean((lam <= 0.1) | (lam >= 0.9))
    oracle = beta.cdf(0.1, 0.2, 0.2) + beta.sf(0.9, 0.2, 0.2)
    assert oracle > 0.6 and frac >= 0.6
    assert frac == pytest.approx(oracle, abs=0.02)


def test_cross_mixup_leftovers(rng):
    Xt, Yt = rng.normal(size=(4, 3)), as_targets(np.array([0, 1, 0, 1]), 2)
    Xa, Ya = rng.normal(size=(6, 3)), as_targets(np.array([1, 1, 0, 0, 1, 0]), 2)
    r = np.random.default_rng(0)
    Xm, Ym, Xl, Yl, lam = mix_batch(Xt, Yt, Xa, Ya, MixupConfig(True, "cross"), r)
    r = np.random.default_rng(0)
    r.beta(0.2, 0.2, size=4)
    partner = r.integers(0, 6, size=4)
    assert np.allclose(Xm, lam[:, None] * Xt + (1 - lam[:, None]) * Xa[partner])
    assert Xl.shape[0] == 6 - len(set(partner.tolist()))
    assert np.allclose(Ym.sum(1), 1.0)


def test_intra_mixup_keeps_aux(rng):
    Xt, Yt = rng.normal(size=(4, 3)), as_targets(np.array([0, 1, 0, 1]), 2)
    Xa, Ya = rng.normal(size=(2, 3)), as_targets(np.array([1, 0]), 2)
    _, _, Xl, _, lam = mix_batch(Xt, Yt, Xa, Ya, MixupConfig(True, "intra"), np.random.default_rng(1))
    assert np.array_equal(Xl, Xa) and lam.shape == (4,)


def test_empty_aux_reduces_to_teacher_training():
    t = two_blob_target(90)
    opt = OptimizerConfig(lr_per_sample=0.01, epochs=4, batch_size=16, warmup_epochs=1)
    for kind in ("linear-softmax", "mlp-1hidden"):
        a, _ = train_classifier(t, opt, seed=11, kind=kind)
        b, _ = train_student(t, None, opt, SamplerConfig(batch_target=16), MixupConfig(), None, seed=11, kind=kind)
        assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_first_step_is_minus_lr_grad():
    t = two_blob_target(1)
    opt = OptimizerConfig(lr_per_sample=0.05, momentum=0.0, weight_decay=0.0, epochs=1, batch_size=1, schedule="step")
    m, _ = train_student(t, None, opt, SamplerConfig(batch_target=1), seed=0)
    m0 = init_model("linear-softmax", t.feature_dims, 2, 0)
    _, g = loss_and_grad(m0, t.feature_matrix(), t.class_indices())
    for p, p0, gi in zip(m.params, m0.params, g):
        assert np.allclose(p, p0 - 0.05 * gi, atol=1e-15)


def _aux(t):
    ss = [Sample(f"a{i:03d}", "image", s.frames, pseudo_label=int(s.label), confidence=0.9, feature=s.feature) for i, s in enumerate(t)]
    return Manifest("auxiliary", t.label_space, ss)


def test_storage_order_invariance_and_reproducible_validation():
    t = two_blob_target(64, seed=1)
    v = two_blob_target(40, seed=2, role="validation")
    aux = _aux(two_blob_target(30, seed=3))
    shuffled = aux.with_samples([aux.samples[i] for i in np.random.default_rng(0).permutation(len(aux))])
    opt = OptimizerConfig(lr_per_sample=0.01, epochs=3, batch_size=16)
    a, ra = train_student(t, aux, opt, SamplerConfig(batch_target=16), None, v, seed=4)
    b, rb = train_student(t, shuffled, opt, SamplerConfig(batch_target=16), None, v, seed=4)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert [r.val_top1 for r in ra] == [r.val_top1 for r in rb]
    for r in ra:
        assert r.total_loss == pytest.approx(r.target_loss + r.auxiliary_loss)
    c, rc = train_student(t, aux, opt, SamplerConfig(batch_target=16), MixupConfig(True), v, seed=4)
    d, rd = train_student(t, aux, opt, SamplerConfig(batch_target=16), MixupConfig(True), v, seed=4)
    assert c.equals(d) and [r.to_dict() for r in rc] == [r.to_dict() for r in rd]


def test_top_k_tie_break():
    P = np.full((4, 4), 0.25)
    assert top_k_from_proba(P, np.array([0, 1, 2, 3]), 1) == 0.25
    assert top_k_from_proba(P, np.array([0, 0, 0, 1]), 1) == 0.75
    assert top_k_from_proba(P, np.array([3, 3, 3, 3]), 4) == 1.0
