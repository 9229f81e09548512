"""End-to-end acceptance checks.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured numbers and
then asserts the same condition, so ``pytest -v`` output doubles as a report.
Run ``python tests/test_acceptance.py`` to print the lines without pytest.
"""

import hashlib
import shutil
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from omnisource.core import FeaturizerConfig, LabelSpace, Manifest, Sample, featurize_manifest, make_rng
from omnisource.dedup import DedupConfig, dedup_pool
from omnisource.evaluation import accuracy_from_matrix, confusion_delta, confusion_score
from omnisource.inflate import Homography, InflateConfig, WarpModel, apply_homography, compose, fit_warp_model, inflate_image, sample_homography
from omnisource.pipeline import DEFAULT_OPTIMIZER, run_pipeline, synth_config
from omnisource.sampler import ResampleStrategy, class_weights, draw_auxiliary
from omnisource.synth import SynthSpec, generate_synthetic, raw_auxiliary
from omnisource.teacher import ClassifierModel, OptimizerConfig, init_model, loss_and_grad, predict_proba, proba_matrix
from omnisource.trainer import SamplerConfig, joint_loss, mix_batch, MixupConfig, top_k_from_proba, train_student
from omnisource.trim import SnippetConfig, build_snippets, score_frames

SEEDS = range(5)
REJECT_FRACTION = 0.6
# collected by the terminal-summary hook in conftest.py
LINES = []


@contextmanager
def _timer():
    t = [time.perf_counter(), None]
    yield t
    t[1] = time.perf_counter() - t[0]


def report(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}: {detail}"
    LINES.append((n, line))
    print(line, flush=True)
    return ok


def _top1(model, m):
    return top_k_from_proba(proba_matrix(model, m.feature_matrix()), m.class_indices(), 1)


# ---------------------------------------------------------------------------


def test_c1_raw_pool_hurts():
    fc = FeaturizerConfig()
    opt = OptimizerConfig(**DEFAULT_OPTIMIZER)
    base, raw = [], []
    with _timer() as t:
        for seed in SEEDS:
            d = generate_synthetic(SynthSpec(n_motion_videos=0), seed)
            tg, va = featurize_manifest(d.target, fc), featurize_manifest(d.validation, fc)
            aux = featurize_manifest(raw_auxiliary(d.pools["images"], d.truth), fc)
            b, _ = train_student(tg, None, opt, SamplerConfig(), None, None, seed)
            r, _ = train_student(tg, aux, opt, SamplerConfig(), None, None, seed)
            base.append(_top1(b, va))
            raw.append(_top1(r, va))
    delta = 100 * (np.mean(raw) - np.mean(base))
    ok = delta <= -2.0 and t[1] < 120
    assert report(1, "raw web pool hurts", ok,
                  f"baseline {np.mean(base):.4f}, raw pool {np.mean(raw):.4f}, delta {delta:+.2f} pts "
                  f"(need <= -2.00); {t[1]:.1f} s (limit 120 s)")


def _pipeline_top1(spec, seed):
    out = Path(tempfile.mkdtemp(prefix="omni-acc-"))
    try:
        res = run_pipeline(synth_config(spec, seed, reject_fraction=REJECT_FRACTION), out)
    finally:
        shutil.rmtree(out, ignore_errors=True)
    rej = [v["rejection_rate"] for k, v in res.reports.items() if k.startswith("filter_")]
    return res.reports["eval"]["top1"], res.reports["eval"]["baseline_top1"], rej


def test_c2_filtered_sources_help():
    sizes = dict(n_images=2000, n_trimmed=400, n_untrimmed=40)
    runs = {
        "images": dict(sizes, n_trimmed=0, n_untrimmed=0),
        "trimmed": dict(sizes, n_images=0, n_untrimmed=0),
        "untrimmed": dict(sizes, n_images=0, n_trimmed=0),
        "all": sizes,
    }
    acc = {k: [] for k in runs}
    base, rejection = [], []
    with _timer() as t:
        for seed in SEEDS:
            for name, s in runs.items():
                top1, b, rej = _pipeline_top1(SynthSpec(**s, n_motion_videos=32), seed)
                acc[name].append(top1)
                rejection += rej
            base.append(b)
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    gain = 100 * (mean["images"] - np.mean(base))
    rej_ok = all(0.5 <= r <= 0.8 for r in rejection)
    beats = all(mean["all"] > mean[k] for k in ("images", "trimmed", "untrimmed"))
    ok = gain >= 2.0 and rej_ok and beats and t[1] < 300
    singles = ", ".join(f"{k} {mean[k]:.4f}" for k in ("images", "trimmed", "untrimmed"))
    assert report(2, "teacher-filtered web data helps", ok,
                  f"baseline {np.mean(base):.4f}, filtered images {mean['images']:.4f}, gain {gain:+.2f} pts "
                  f"(need >= +2.00); rejection {min(rejection):.2f}-{max(rejection):.2f} (need 0.50-0.80); "
                  f"all sources {mean['all']:.4f} vs singles [{singles}] (need all > every single); "
                  f"{t[1]:.1f} s (limit 300 s)")


def _fd_relerr(model, loss_fn, h=1e-6):
    _, grads = loss_fn(model)
    worst = 0.0
    for pi, g in enumerate(grads):
        num = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            vals = []
            for sgn in (1, -1):
                ps = [p.copy() for p in model.params]
                ps[pi][idx] += sgn * h
                vals.append(loss_fn(model.with_params(ps))[0])
            num[idx] = (vals[0] - vals[1]) / (2 * h)
        denom = max(np.linalg.norm(g), np.linalg.norm(num), 1e-12)
        worst = max(worst, np.linalg.norm(g - num) / denom)
    return worst


def test_c3_joint_loss_additive_and_gradients():
    rng = make_rng(0, "c3")
    K, d = 4, 6
    worst_add, worst_grad = 0.0, 0.0
    with _timer() as t:
        for i in range(20):
            kind = ("linear-softmax", "mlp-1hidden")[i % 2]
            m = init_model(kind, d, K, i, hidden=5)
            m = m.with_params([rng.normal(0, 0.5, p.shape) for p in m.params])
            Xt, yt = rng.normal(size=(6, d)), rng.integers(0, K, 6)
            Xa, ya = rng.normal(size=(5, d)), rng.integers(0, K, 5)
            Yt, Ya = np.eye(K)[yt], np.eye(K)[ya]
            Xt, Yt, Xa, Ya, _ = mix_batch(Xt, Yt, Xa, Ya, MixupConfig(True, "cross", 0.4), rng)
            full, _, lt, la = joint_loss(m, (Xt, Yt), (Xa, Ya))
            split = loss_and_grad(m, Xt, Yt)[0] + loss_and_grad(m, Xa, Ya)[0]
            worst_add = max(worst_add, abs(full - split), abs(full - (lt + la)))
            fn = lambda mm: joint_loss(mm, (Xt, Yt), (Xa, Ya))[:2]  # noqa: E731
            worst_grad = max(worst_grad, _fd_relerr(m, fn))
    ok = worst_add <= 1e-12 and worst_grad <= 1e-4 and t[1] < 10
    assert report(3, "joint loss additivity and gradients", ok,
                  f"max split error {worst_add:.2e} (<= 1e-12), max relative gradient error {worst_grad:.2e} "
                  f"(<= 1e-4) over 20 instances with mixed soft labels; {t[1]:.2f} s (limit 10 s)")


def _smooth(size=32):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    return (0.5 + 0.25 * np.sin(2 * np.pi * xx) * np.cos(np.pi * yy))[:, :, None]


def test_c4_homography_chains():
    rng = make_rng(0, "c4")
    img = _smooth()
    n = img.shape[0]
    exact, worst_mae = True, 0.0
    with _timer() as t:
        for _ in range(10):
            steps = rng.integers(-1, 2, size=(8, 2))
            chain = [Homography.translation(int(a), int(b), n, n) for a, b in steps]
            it = img
            for h in chain:
                it = apply_homography(it, h)
            one = apply_homography(img, compose(chain))
            m = int(np.abs(steps).sum(axis=0).max()) + 1
            exact &= bool(np.array_equal(it[m:-m, m:-m], one[m:-m, m:-m]))
        seqs = []
        for _ in range(20):
            seq = []
            for _ in range(5):
                mtx = np.eye(3)
                mtx[:2, :2] += rng.normal(0, 0.01, (2, 2))
                mtx[:2, 2] += rng.normal(0, 0.02, 2)
                mtx[2, :2] += rng.normal(0, 0.0025, 2)
                seq.append(Homography(mtx))
            seqs.append(seq)
        model = fit_warp_model(seqs)
        for _ in range(10):
            chain = [sample_homography(model, rng) for _ in range(8)]
            it = img
            for h in chain:
                it = apply_homography(it, h)
            one = apply_homography(img, compose(chain))
            worst_mae = max(worst_mae, float(np.abs(it - one)[6:-6, 6:-6].mean()))
        still = WarpModel(Homography.identity().params, np.zeros((8, 8)))
        s = Sample("i", "image", (rng.random((16, 16, 3)),))
        warped = inflate_image(s, InflateConfig("warp", 6, warp_model=still), rng)
        repl = inflate_image(s, InflateConfig("replicate", 6), rng)
        replic = all(np.array_equal(a, b) for a, b in zip(warped.frames, repl.frames))
    ok = exact and worst_mae <= 0.02 and replic and t[1] < 10
    assert report(4, "homography chain algebra", ok,
                  f"integer chains exact on interior: {exact}; worst length-8 chain MAE {worst_mae:.4f} (<= 0.02); "
                  f"sigma-zero identity warp equals replication bitwise: {replic}; {t[1]:.2f} s (limit 10 s)")


def test_c5_warp_model_mle():
    rng = make_rng(0, "c5")
    with _timer() as t:
        P = np.array([1, 0, 0, 0, 1, 0, 0, 0]) + rng.normal(0, 0.05, (100, 8))
        m = fit_warp_model([[Homography.from_params(p)] for p in P])
        mu = np.array([sum(P[i, j] for i in range(100)) / 100 for j in range(8)])
        D = P - mu
        cov = np.array([[sum(D[i, a] * D[i, b] for i in range(100)) / 100 for b in range(8)] for a in range(8)])
        err = max(np.abs(m.mu - mu).max(), np.abs(m.sigma - cov).max())
        h = Homography.from_params(P[0])
        z = fit_warp_model([[h] * 7])
        zero = bool(np.array_equal(z.sigma, np.zeros((8, 8)))) and bool(np.array_equal(z.mu, h.params))
    ok = err <= 1e-10 and zero and t[1] < 1
    assert report(5, "warp model maximum likelihood", ok,
                  f"max deviation from two-pass oracle {err:.2e} (<= 1e-10) on 100 vectors; zero-variance "
                  f"input gives sigma = 0 exactly: {zero}; {t[1]:.3f} s (limit 1 s)")


def test_c6_resampling_laws():
    with _timer() as t:
        pw = class_weights([100, 1], ResampleStrategy("power", p=0.2))
        cl = class_weights([6000, 3000], ResampleStrategy("clipped", n_c=5000))
        counts = [500, 100, 20, 5, 1]
        ls = LabelSpace.numbered(len(counts))
        f = (np.zeros((2, 2, 1)),)
        m = Manifest("auxiliary", ls, [Sample(f"x{c}_{i}", "image", f, pseudo_label=c, confidence=1.0)
                                       for c, k in enumerate(counts) for i in range(k)])
        tv = 0.0
        for strat in (ResampleStrategy("power", p=0.2), ResampleStrategy("clipped", n_c=50), ResampleStrategy("none")):
            idx = draw_auxiliary(m, strat, 100_000, make_rng(0, "c6", strat.kind))
            freq = np.bincount([m.samples[i].pseudo_label for i in idx], minlength=len(counts)) / idx.size
            tv = max(tv, 0.5 * float(np.abs(freq - class_weights(counts, strat)).sum()))
    ok = np.all(np.abs(pw - [0.71525, 0.28475]) <= 1e-4) and cl.tolist() == [0.625, 0.375] and tv <= 0.01 and t[1] < 5
    assert report(6, "resampling laws", ok,
                  f"power p=0.2 on [100, 1] -> [{pw[0]:.5f}, {pw[1]:.5f}]; clipped -> {cl.tolist()}; "
                  f"worst TV distance over 100k draws {tv:.4f} (<= 0.01); {t[1]:.2f} s (limit 5 s)")


def test_c7_snippets():
    feat = FeaturizerConfig(grid=1, consensus="segment-average")
    W = np.zeros((2, feat.dims(1)))
    W[0, 1] = 8.0
    teacher = ClassifierModel("linear-softmax", W.shape[1], 2, (W, np.zeros(2)), featurizer=feat)
    cfg = SnippetConfig(threshold=0.8)
    rng = make_rng(0, "c7")
    bad_frames = bad_count = 0
    with _timer() as t:
        for k in range(50):
            vals = rng.random(int(rng.integers(3, 30)))
            # every video carries enough negatives to complete a snippet
            vals[rng.choice(vals.size, cfg.n_neg, replace=False)] = rng.uniform(0, 0.1, cfg.n_neg)
            v = Sample(f"v{k}", "untrimmed", tuple(np.full((4, 4, 1), x) for x in vals))
            sc = score_frames(v, teacher, cfg)
            snips = build_snippets(v, sc, cfg, make_rng(k, "snip"))
            bad_count += len(snips) != sum(s.positive for s in sc) // cfg.n_pos
            for s in snips:
                conf = [predict_proba(teacher, Sample("f", "image", (fr,))).max() for fr in s.frames]
                bad_frames += not (sum(c >= cfg.threshold for c in conf) == 1 and sum(c < cfg.threshold for c in conf) == 2)
    ok = bad_frames == 0 and bad_count == 0 and t[1] < 10
    assert report(7, "snippet construction", ok,
                  f"{bad_frames} snippets violate 1 positive + 2 negatives, {bad_count} of 50 videos have a wrong "
                  f"snippet count; {t[1]:.2f} s (limit 10 s)")


def test_c8_confusion_analytics():
    rng = make_rng(0, "c8")
    with _timer() as t:
        n = np.array([[5, 2], [1, 2]])
        s = confusion_score(n, 0, 1)
        anti, trace = True, True
        for _ in range(20):
            a = rng.integers(0, 30, size=(6, 6))
            b = rng.integers(0, 30, size=(6, 6))
            ab = {(i, j): d for i, j, d in confusion_delta(a, b).deltas}
            ba = {(i, j): d for i, j, d in confusion_delta(b, a).deltas}
            anti &= ab.keys() == ba.keys() and all(ab[k] == -ba[k] for k in ab)
            y = rng.integers(0, 6, 200)
            pred = np.where(rng.random(200) < 0.7, y, rng.integers(0, 6, 200))
            P = np.eye(6)[pred]
            mat = np.zeros((6, 6), dtype=int)
            np.add.at(mat, (y, pred), 1)
            trace &= top_k_from_proba(P, y, 1) == accuracy_from_matrix(mat)
    ok = s == 0.3 and anti and trace and t[1] < 1
    assert report(8, "confusion analytics", ok,
                  f"score(2,1,5,2) = {s!r}; delta antisymmetric: {anti}; top-1 == trace/total on 20 matrices: "
                  f"{trace}; {t[1]:.3f} s (limit 1 s)")


def test_c9_dedup_soundness():
    with _timer() as t:
        d = generate_synthetic(SynthSpec(n_images=0, n_motion_videos=0), 0)
        val = d.validation
        rng = make_rng(0, "c9")
        shape = (32, 32, 3)
        # distractors: mutually orthogonal pixel patterns centred on grey
        Q, _ = np.linalg.qr(rng.normal(size=(int(np.prod(shape)), 990)))
        pats = 0.5 + 0.5 * Q.T / np.abs(Q).max()
        samples = [Sample(f"dis{i:04d}", "image", (p.reshape(shape),)) for i, p in enumerate(pats)]
        planted = {}
        for j, i in enumerate(rng.choice(len(val), 10, replace=False)):
            planted[f"dup{j:02d}"] = val.samples[i].id
            samples.append(Sample(f"dup{j:02d}", "trimmed", val.samples[i].frames))
        samples = [samples[i] for i in rng.permutation(len(samples))]
        pool = Manifest("web", val.label_space, samples)
        _, rep = dedup_pool(pool, [val], DedupConfig())
    sims = {w: s for w, r, s in rep.pairs if planted.get(w) == r}
    found = sum(1 for w in planted if sims.get(w, 0.0) >= 1 - 1e-6)
    false = sum(1 for w in rep.flagged if w not in planted)
    ok = found == 10 and false == 0 and t[1] < 5
    assert report(9, "dedup soundness", ok,
                  f"{found}/10 planted duplicates flagged at similarity >= 1 - 1e-6, {false} false flags among "
                  f"990 distractors (threshold {rep.threshold:.4f}); {t[1]:.2f} s (limit 5 s)")


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_determinism(tmp_path):
    spec = SynthSpec(n_trimmed=100, n_untrimmed=10)
    with _timer() as t:
        run_pipeline(synth_config(spec, 0, reject_fraction=REJECT_FRACTION), tmp_path / "a")
        run_pipeline(synth_config(spec, 0, reject_fraction=REJECT_FRACTION), tmp_path / "b")
        a, b = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    diff = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {Path(k).suffix for k in a}
    ok = not diff and {".jsonl", ".omdl"} <= kinds and t[1] < 300
    assert report(10, "determinism", ok,
                  f"{len(a)} files per run, {len(diff)} differ{' (' + ', '.join(diff[:5]) + ')' if diff else ''}; "
                  f"{t[1]:.1f} s (limit 300 s)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
