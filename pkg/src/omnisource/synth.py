"""Synthetic target sets, web pools and camera-motion data for desk-scale runs.

Class ``c`` frames show a Gaussian blob on a ring at angle ``2*pi*c/K``.
Out-of-distribution web samples put the blob between the query class and
its neighbour, leaning toward the neighbour (or drop it).  Each web sample
also carries a "query" class, the keyword it would have been crawled under;
for in-distribution samples this equals the generating class.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import LabelSpace, Manifest, Sample, make_rng
from .inflate import Homography


@dataclass(frozen=True)
class SynthSpec:
    K: int = 8
    frame_size: int = 32
    channels: int = 3
    n_target: int = 400
    n_validation: int = 400
    n_images: int = 2000
    n_trimmed: int = 0
    n_untrimmed: int = 0
    noise_fraction: float = 0.6
    clip_frames: int = 4
    blob_radius: float = 9.0
    blob_sigma: float = 2.5
    object_amplitude: float = 0.4
    position_jitter: float = 0.8
    pixel_noise: float = 0.3
    background: float = 0.25
    clutter_blobs: int = 2
    clutter_prob: float = 0.7
    clutter_amplitude: float = 0.7
    clutter_sigma: float = 6.0
    web_clutter_scale: float = 1.0
    web_noise_scale: float = 1.0
    web_object_scale: float = 1.0
    ood_offset: tuple = (0.6, 0.9)
    ood_object_prob: float = 0.85
    untrimmed_seconds: float = 30.0
    untrimmed_fps: float = 2.0
    positive_fraction: float = 0.4
    camera_jitter: float = 0.01
    n_motion_videos: int = 32
    motion_len: int = 8

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("synthetic spec needs K >= 2 classes")
        if not 0.0 <= self.noise_fraction <= 1.0:
            raise ValueError("noise_fraction must be within [0, 1]")
        if not 0.0 < self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be within (0, 1]")
        for name in ("n_target", "n_validation", "n_images", "n_trimmed", "n_untrimmed", "n_motion_videos"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class SynthData:
    label_space: LabelSpace
    target: Manifest
    validation: Manifest
    pools: dict
    truth: dict
    motion: list = field(default_factory=list)
    motion_classes: list = field(default_factory=list)


class _Painter:
    def __init__(self, spec: SynthSpec):
        self.spec = spec
        n = spec.frame_size
        self.yy, self.xx = np.mgrid[0:n, 0:n].astype(np.float64)
        self.centre = (n - 1) / 2.0

    def position(self, slot: float):
        a = 2 * math.pi * slot / self.spec.K
        return self.centre + self.spec.blob_radius * math.cos(a), self.centre + self.spec.blob_radius * math.sin(a)

    def blob(self, x, y, amp, sigma):
        return amp * np.exp(-((self.xx - x) ** 2 + (self.yy - y) ** 2) / (2 * sigma * sigma))

    def scene(self, rng, slot, clutter_scale=1.0, object_scale=1.0):
        """Object position/amplitude and clutter blobs; ``slot`` None means no object."""
        s = self.spec
        blobs = []
        if slot is not None:
            x, y = self.position(slot)
            jx, jy = rng.normal(0.0, s.position_jitter, size=2)
            amp = object_scale * s.object_amplitude * rng.uniform(0.8, 1.2)
            blobs.append((x + jx, y + jy, np.full(s.channels, amp), s.blob_sigma))
        for _ in range(s.clutter_blobs):
            if rng.random() < s.clutter_prob:
                cx, cy = rng.uniform(0, s.frame_size - 1, size=2)
                colour = rng.uniform(0.0, 1.0, size=s.channels) if s.channels > 1 else np.ones(1)
                amp = clutter_scale * s.clutter_amplitude * rng.uniform(0.5, 1.0) * colour
                blobs.append((cx, cy, amp, s.clutter_sigma * rng.uniform(0.7, 1.5)))
        return blobs

    def render(self, rng, blobs, offset=(0.0, 0.0), noise_scale=1.0):
        s = self.spec
        img = np.full((s.frame_size, s.frame_size, s.channels), s.background)
        for x, y, amp, sigma in blobs:
            img += self.blob(x + offset[0], y + offset[1], 1.0, sigma)[:, :, None] * amp
        img += rng.normal(0.0, noise_scale * s.pixel_noise, size=img.shape)
        return np.clip(img, 0.0, 1.0)

    def frame(self, rng, slot, clean=False):
        """``clean`` frames model iconic web photos: weaker clutter and sensor noise."""
        if clean:
            s = self.spec
            return self.render(rng, self.scene(rng, slot, s.web_clutter_scale, s.web_object_scale), noise_scale=s.web_noise_scale)
        return self.render(rng, self.scene(rng, slot))

    def clip(self, rng, slot, n_frames):
        """A static scene seen by a slowly drifting camera, fresh sensor noise per frame."""
        blobs = self.scene(rng, slot)
        v = rng.normal(0.0, 0.5, size=2)
        return [self.render(rng, blobs, (v[0] * t, v[1] * t)) for t in range(n_frames)]


def _ood_slot(rng, query, spec):
    """Off-class content returned for ``query``: between it and its neighbour, or empty."""
    if rng.random() < spec.ood_object_prob:
        return query + rng.uniform(*spec.ood_offset)
    return None


def _labeled(painter, rng, prefix, n, K, role, label_space, n_frames):
    samples = []
    for i in range(n):
        c = i % K
        samples.append(
            Sample(f"{prefix}{i:05d}", "trimmed", tuple(painter.clip(rng, c, n_frames)), fps=1.0, label=c)
        )
    return Manifest(role, label_space, samples)


def camera_motion(spec: SynthSpec, rng: np.random.Generator, cls: int) -> list[Homography]:
    """Jittered camera motion: small per-step similarity plus perspective terms."""
    drift = 0.02 * np.array([math.cos(2 * math.pi * cls / spec.K), math.sin(2 * math.pi * cls / spec.K)])
    seq = []
    j = spec.camera_jitter
    for _ in range(spec.motion_len):
        tx, ty = drift + rng.normal(0.0, 2 * j, size=2)
        ang = rng.normal(0.0, j)
        sc = 1.0 + rng.normal(0.0, j)
        px, py = rng.normal(0.0, j / 4, size=2)
        m = np.array(
            [
                [sc * math.cos(ang), -sc * math.sin(ang), tx],
                [sc * math.sin(ang), sc * math.cos(ang), ty],
                [px, py, 1.0],
            ]
        )
        seq.append(Homography(m))
    return seq


def generate_synthetic(spec: SynthSpec, seed: int) -> SynthData:
    K = spec.K
    ls = LabelSpace.numbered(K)
    painter = _Painter(spec)
    target = _labeled(painter, make_rng(seed, "synth", "target"), "tgt", spec.n_target, K, "target", ls, spec.clip_frames)
    validation = _labeled(
        painter, make_rng(seed, "synth", "validation"), "val", spec.n_validation, K, "validation", ls, spec.clip_frames
    )
    truth = {}
    pools = {}

    rng = make_rng(seed, "synth", "images")
    imgs = []
    for i in range(spec.n_images):
        q = int(rng.integers(K))
        ood = rng.random() < spec.noise_fraction
        slot = _ood_slot(rng, q, spec) if ood else q
        sid = f"img{i:05d}"
        imgs.append(Sample(sid, "image", (painter.frame(rng, slot, clean=True),)))
        truth[sid] = {"class": -1 if ood else q, "query": q}
    pools["images"] = Manifest("web", ls, imgs)

    rng = make_rng(seed, "synth", "trimmed")
    clips = []
    for i in range(spec.n_trimmed):
        q = int(rng.integers(K))
        ood = rng.random() < spec.noise_fraction
        slot = _ood_slot(rng, q, spec) if ood else q
        sid = f"trm{i:05d}"
        clips.append(Sample(sid, "trimmed", tuple(painter.clip(rng, slot, spec.clip_frames))))
        truth[sid] = {"class": -1 if ood else q, "query": q}
    pools["trimmed"] = Manifest("web", ls, clips)

    rng = make_rng(seed, "synth", "untrimmed")
    vids = []
    n_frames = max(1, int(round(spec.untrimmed_seconds * spec.untrimmed_fps)))
    for i in range(spec.n_untrimmed):
        q = int(rng.integers(K))
        ood = rng.random() < spec.noise_fraction
        frames = []
        # in-class content occupies one contiguous segment of the video
        n_pos = 0 if ood else max(1, int(round(spec.positive_fraction * n_frames)))
        start = int(rng.integers(0, n_frames - n_pos + 1))
        for t in range(n_frames):
            if start <= t < start + n_pos:
                frames.append(painter.frame(rng, q))
            else:
                frames.append(painter.frame(rng, _ood_slot(rng, q, spec) if rng.random() < 0.5 else None))
        sid = f"unt{i:05d}"
        vids.append(Sample(sid, "untrimmed", tuple(frames), fps=spec.untrimmed_fps))
        truth[sid] = {"class": -1 if ood else q, "query": q, "segment": [start, start + n_pos]}
    pools["untrimmed"] = Manifest("web", ls, vids)

    rng = make_rng(seed, "synth", "motion")
    motion, motion_classes = [], []
    for v in range(spec.n_motion_videos):
        c = v % K
        motion.append(camera_motion(spec, rng, c))
        motion_classes.append(c)
    return SynthData(ls, target, validation, pools, truth, motion, motion_classes)


def raw_auxiliary(pool: Manifest, truth: dict) -> Manifest:
    """The unfiltered pool, labeled by crawl query (keyword) with confidence 1."""
    samples = [s.with_(pseudo_label=truth[s.id]["query"], confidence=1.0) for s in pool]
    return pool.with_samples(samples, role="auxiliary")


def save_motion(path, sequences, classes) -> None:
    """Per-video homography lists as JSON: [{"class": c, "homographies": [[9 floats], ...]}]."""
    data = [
        {"class": int(c), "homographies": [h.matrix.ravel().tolist() for h in seq]}
        for seq, c in zip(sequences, classes)
    ]
    Path(path).write_text(json.dumps(data, separators=(",", ":")) + "\n")


def load_motion(path):
    data = json.loads(Path(path).read_text())
    return [[Homography(np.asarray(m).reshape(3, 3)) for m in v["homographies"]] for v in data], [
        v["class"] for v in data
    ]


def spec_to_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
