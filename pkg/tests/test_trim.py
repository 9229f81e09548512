import numpy as np
import pytest

from omnisource.core import FeaturizerConfig, Sample, make_rng
from omnisource.teacher import ClassifierModel, init_model, predict_proba
from omnisource.trim import ClipConfig, FrameScore, SnippetConfig, build_snippets, clip_windows, cut_clips, score_frames


def mean_teacher(scale=10.0, consensus="segment-average", stack_k=3):
    feat = FeaturizerConfig(grid=1, consensus=consensus, stack_k=stack_k)
    d = feat.dims(1)
    W = np.zeros((2, d))
    W[0, 1::5] = scale  # pooled mean of every stacked frame
    return ClassifierModel("linear-softmax", d, 2, (W, np.zeros(2)), featurizer=feat)


def video(values, fps=1.0):
    return Sample("v", "untrimmed", tuple(np.full((4, 4, 1), v) for v in values), fps=fps)


def fs(conf, th=0.5):
    return [FrameScore(i, c, 0, c >= th) for i, c in enumerate(conf)]


def test_stride_arithmetic():
    sc = score_frames(video(np.zeros(40), fps=4.0), mean_teacher(), SnippetConfig())
    assert [s.index for s in sc] == list(range(0, 40, 4))
    with pytest.raises(ValueError):
        score_frames(video([0.0, 0.0], fps=4.0), mean_teacher(), SnippetConfig())
    with pytest.raises(ValueError):
        score_frames(video([0.0]), mean_teacher(consensus="stack-k"), SnippetConfig())


def test_uniform_teacher_and_zero_threshold():
    t = init_model("linear-softmax", 5, 4, 0, featurizer=FeaturizerConfig(grid=1))
    sc = score_frames(video(np.linspace(0, 1, 6)), t, SnippetConfig(threshold=0.3))
    assert not any(s.positive for s in sc)
    sc = score_frames(video(np.linspace(0, 1, 6)), t, SnippetConfig(threshold=0.0))
    assert all(s.positive for s in sc)


def test_two_positive_example():
    v = video(np.arange(5) / 10)
    snips = build_snippets(v, fs([0.9, 0.8, 0.2, 0.1, 0.05]), SnippetConfig(), make_rng(0, "s"))
    assert len(snips) == 2
    for s in snips:
        idx = [int(round(f[0, 0, 0] * 10)) for f in s.frames]
        assert idx == sorted(idx) and len(set(idx) & {0, 1}) == 1 and len(set(idx) & {2, 3, 4}) == 2
    assert sorted(s.confidence for s in snips) == pytest.approx([0.8, 0.9])


def test_three_positive_configuration():
    v = video(np.arange(7) / 10)
    snips = build_snippets(v, fs([0.9, 0.8, 0.7, 0.6, 0.1, 0.95, 0.2]), SnippetConfig(n_pos=3, n_neg=0), make_rng(0, "s"))
    assert len(snips) == 1 and len(snips[0].frames) == 3


def test_zero_positives():
    assert build_snippets(video([0.1] * 4), fs([0.1] * 4), SnippetConfig(), make_rng(0, "s")) == []


def test_label_majority_and_tie():
    from omnisource.trim import _snippet_label

    assert _snippet_label([FrameScore(0, 0.6, 1, True), FrameScore(1, 0.7, 1, True), FrameScore(2, 0.99, 0, True)]) == 1
    assert _snippet_label([FrameScore(0, 0.6, 1, True), FrameScore(1, 0.9, 0, True)]) == 0


def test_snippet_properties_on_random_videos(rng):
    t = mean_teacher(8.0)
    cfg = SnippetConfig(threshold=0.8)
    for k in range(50):
        v = video(rng.random(int(rng.integers(3, 30))))
        sc = score_frames(v, t, cfg)
        snips = build_snippets(v, sc, cfg, make_rng(k, "snip"))
        pos = sum(s.positive for s in sc)
        neg = len(sc) - pos
        assert len(snips) == (pos // cfg.n_pos if neg >= cfg.n_neg else 0)
        for s in snips:
            conf = [predict_proba(t, Sample("f", "image", (f,))).max() for f in s.frames]
            assert sum(c >= cfg.threshold for c in conf) == 1 and sum(c < cfg.threshold for c in conf) == 2


def test_clip_partition():
    assert clip_windows(35, 1.0, 10) == [(0, 10), (10, 20), (20, 30)]
    assert clip_windows(5, 1.0, 10) == []
    w = clip_windows(47, 2.0, 3)
    assert all(a == b for (_, a), (b, _) in zip(w, w[1:])) and w[0][0] == 0 and w[-1][1] <= 47


def test_cut_clips_keeps_middle():
    vals = [0.0] * 10 + [0.9] * 10 + [0.0] * 10 + [0.0] * 5
    t = mean_teacher(10.0, "stack-k")
    out = cut_clips(video(vals), t, ClipConfig(clip_seconds=10, threshold=0.9))
    assert [c.id for c in out] == ["v#clip1"] and out[0].pseudo_label == 0
    for k, (a, b) in enumerate(clip_windows(35, 1.0, 10)):
        p = predict_proba(t, Sample("c", "trimmed", video(vals).frames[a:b]))
        assert (p.max() >= 0.9) == (k == 1)
    assert cut_clips(video(vals), t, ClipConfig(threshold=1.0)) == []
    assert cut_clips(video([0.5] * 5), t, ClipConfig()) == []
    with pytest.raises(ValueError):
        cut_clips(video(vals), mean_teacher(), ClipConfig())
