"""Domain types, deterministic featurisation, seeded RNG streams, manifest I/O."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels

SOURCE_KINDS = ("image", "trimmed", "untrimmed")
ROLES = ("target", "web", "auxiliary", "validation")
CONSENSUS_MODES = ("segment-average", "stack-k")

MANIFEST_VERSION = 1
FEATURE_MAGIC = b"OMNF"
FRAME_MAGIC = b"OMFR"


class ManifestError(ValueError):
    """Malformed manifest record or header."""


class DimensionError(ValueError):
    """Feature dimensionality does not match what the consumer expects."""


# ---------------------------------------------------------------------------
# randomness


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    The Philox key is a hash of the seed and the stream name, so two stages
    never share draws and can run in any order.
    """

    seed: int
    stream_id: str

    def generator(self) -> np.random.Generator:
        digest = hashlib.blake2b(
            f"{int(self.seed) & (2**64 - 1)}|{self.stream_id}".encode(), digest_size=16
        ).digest()
        key = np.frombuffer(digest, dtype="<u8").copy()
        return np.random.Generator(np.random.Philox(key=key))


def make_rng(seed: int, *stream: object) -> np.random.Generator:
    return RngStream(seed, "/".join(str(s) for s in stream)).generator()


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded permutation of ``range(n)`` for one pass over a target set."""
    return make_rng(seed, "epoch-order", epoch).permutation(n)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class LabelSpace:
    class_names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.class_names)
        object.__setattr__(self, "class_names", names)
        if len(names) < 2:
            raise ValueError("a label space needs at least 2 classes")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")

    @property
    def K(self) -> int:
        return len(self.class_names)

    @classmethod
    def numbered(cls, k: int) -> "LabelSpace":
        return cls(tuple(f"class_{i}" for i in range(k)))


def as_frame(pixels) -> np.ndarray:
    """Validate and canonicalise one frame to a float32 (H, W, C) array."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"frame must be (H, W) or (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("frame must be non-empty")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("frame pixels must be finite and within [0, 1]")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Sample:
    """One image, trimmed clip or untrimmed video.

    Frames are stored as read-only float32 (H, W, C) arrays and features as a
    read-only float32 vector, so persisted manifests round-trip exactly.
    """

    id: str
    source_kind: str
    frames: tuple = ()
    fps: float = 1.0
    label: int | None = None
    pseudo_label: int | None = None
    confidence: float | None = None
    feature: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValueError("sample id must be a non-empty string")
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source_kind {self.source_kind!r}")
        frames = tuple(as_frame(f) for f in self.frames)
        object.__setattr__(self, "frames", frames)
        if self.source_kind == "image" and len(frames) != 1:
            raise ValueError(f"image sample {self.id} must have exactly 1 frame")
        if self.source_kind == "trimmed" and len(frames) < 1:
            raise ValueError(f"trimmed sample {self.id} needs at least 1 frame")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "fps", float(self.fps))
        if self.label is not None and self.pseudo_label is not None:
            raise ValueError(f"sample {self.id} has both label and pseudo_label")
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))
        if self.pseudo_label is not None:
            object.__setattr__(self, "pseudo_label", int(self.pseudo_label))
            if self.confidence is None:
                raise ValueError(f"sample {self.id}: pseudo_label requires confidence")
        if self.confidence is not None:
            conf = float(self.confidence)
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"sample {self.id}: confidence {conf} outside [0, 1]")
            object.__setattr__(self, "confidence", conf)
        if self.feature is not None:
            feat = np.array(self.feature, dtype=np.float32).ravel()
            if not np.all(np.isfinite(feat)):
                raise ValueError(f"sample {self.id}: non-finite feature values")
            feat.setflags(write=False)
            object.__setattr__(self, "feature", feat)

    @property
    def target_class(self) -> int | None:
        """Ground-truth label if present, else the pseudo-label."""
        return self.label if self.label is not None else self.pseudo_label

    def with_(self, **changes) -> "Sample":
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        if (self.id, self.source_kind, self.fps, self.label, self.pseudo_label, self.confidence) != (
            other.id, other.source_kind, other.fps, other.label, other.pseudo_label, other.confidence
        ):
            return False
        if len(self.frames) != len(other.frames):
            return False
        if any(a.shape != b.shape or not np.array_equal(a, b) for a, b in zip(self.frames, other.frames)):
            return False
        if (self.feature is None) != (other.feature is None):
            return False
        return self.feature is None or np.array_equal(self.feature, other.feature)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Manifest:
    role: str
    label_space: LabelSpace
    samples: tuple = ()
    feature_dims: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown manifest role {self.role!r}")
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        k = self.label_space.K
        dims = self.feature_dims
        for s in samples:
            if self.role in ("target", "validation") and s.label is None:
                raise ValueError(f"{self.role} sample {s.id} is unlabeled")
            if self.role == "auxiliary" and (s.pseudo_label is None or s.confidence is None):
                raise ValueError(f"auxiliary sample {s.id} lacks pseudo_label/confidence")
            cls = s.target_class
            if cls is not None and not 0 <= cls < k:
                raise ValueError(f"sample {s.id}: class index {cls} outside [0, {k})")
            if s.feature is not None:
                if dims is None:
                    dims = s.feature.size
                elif s.feature.size != dims:
                    raise DimensionError(
                        f"sample {s.id}: feature has {s.feature.size} dims, manifest expects {dims}"
                    )
        object.__setattr__(self, "feature_dims", dims)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return (
            self.role == other.role
            and self.label_space == other.label_space
            and self.feature_dims == other.feature_dims
            and len(self.samples) == len(other.samples)
            and all(a == b for a, b in zip(self.samples, other.samples))
        )

    __hash__ = None

    def with_samples(self, samples: Iterable[Sample], role: str | None = None) -> "Manifest":
        samples = tuple(samples)
        dims = self.feature_dims if any(s.feature is not None for s in samples) else None
        return Manifest(role or self.role, self.label_space, samples, dims)

    def feature_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.feature_dims or 0))
        if any(s.feature is None for s in self.samples):
            raise ValueError("manifest has unfeaturized samples")
        return np.stack([s.feature for s in self.samples]).astype(np.float64)

    def class_indices(self) -> np.ndarray:
        out = []
        for s in self.samples:
            if s.target_class is None:
                raise ValueError(f"sample {s.id} has neither label nor pseudo_label")
            out.append(s.target_class)
        return np.asarray(out, dtype=np.int64)


# ---------------------------------------------------------------------------
# featurisation


@dataclass(frozen=True)
class FeaturizerConfig:
    grid: int = 8
    consensus: str = "segment-average"
    stack_k: int = 3

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        if self.consensus not in CONSENSUS_MODES:
            raise ValueError(f"unknown consensus {self.consensus!r}")
        if self.stack_k < 1:
            raise ValueError("stack_k must be >= 1")

    def dims(self, channels: int = 1) -> int:
        per_frame = channels * self.grid * self.grid + 4
        return per_frame * (self.stack_k if self.consensus == "stack-k" else 1)


def frame_feature(frame: np.ndarray, grid: int = 8) -> np.ndarray:
    """Float64 per-frame feature: grid means then mean, std, |dx| mean, |dy| mean."""
    return _kernels.grid_features(as_frame(frame), grid)


def stack_indices(n_frames: int, k: int) -> np.ndarray:
    return ((np.arange(k) + 0.5) * n_frames / k).astype(np.int64)


def featurize_frames(frames: Sequence, config: FeaturizerConfig) -> np.ndarray:
    if len(frames) == 0:
        raise ValueError("cannot featurize a sample with no frames")
    shape = np.shape(frames[0])
    if any(np.shape(f) != shape for f in frames):
        raise ValueError("all frames of a sample must share one shape")
    if config.consensus == "segment-average":
        acc = np.zeros(config.dims(as_frame(frames[0]).shape[2]))
        for f in frames:
            acc += frame_feature(f, config.grid)
        out = acc / len(frames)
    else:
        idx = stack_indices(len(frames), config.stack_k)
        out = np.concatenate([frame_feature(frames[i], config.grid) for i in idx])
    return out.astype(np.float32)


def featurize(sample: Sample, config: FeaturizerConfig) -> np.ndarray:
    return featurize_frames(sample.frames, config)


def featurize_manifest(manifest: Manifest, config: FeaturizerConfig) -> Manifest:
    samples = [s.with_(feature=featurize(s, config)) for s in manifest.samples]
    return Manifest(manifest.role, manifest.label_space, samples)


# ---------------------------------------------------------------------------
# manifest persistence
#
# JSON-Lines: a header object, then one sample object per line.  Frames go to
# a flat float32 sidecar (``<name>.frames``) unless inlined; features are
# inlined unless ``external_features`` is set, in which case they go to an
# OMNF file (``<name>.feat``).


def write_feature_file(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    count, dims = matrix.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", count, dims, 0))
        fh.write(matrix.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise ManifestError(f"{path}: not an OMNF feature file")
    count, dims, _ = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != count * dims:
        raise ManifestError(f"{path}: expected {count}x{dims} floats, found {body.size}")
    return body.reshape(count, dims).astype(np.float32)


def _frames_meta(frames) -> dict:
    shapes = [list(f.shape) for f in frames]
    if shapes and all(s == shapes[0] for s in shapes):
        return {"count": len(shapes), "shape": shapes[0]}
    return {"shapes": shapes}


def save_manifest(
    manifest: Manifest,
    path,
    *,
    inline_frames: bool = False,
    external_features: bool = False,
) -> None:
    path = Path(path)
    frames_name = path.name + ".frames"
    feat_name = path.name + ".feat"
    has_frames = any(s.frames for s in manifest.samples)
    header = {
        "version": MANIFEST_VERSION,
        "role": manifest.role,
        "feature_dims": manifest.feature_dims,
        "class_names": list(manifest.label_space.class_names),
        "frames_file": frames_name if has_frames and not inline_frames else None,
        "features_file": feat_name if external_features and manifest.feature_dims else None,
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    offset = 0
    frame_chunks = []
    feat_rows = []
    for s in manifest.samples:
        rec = {
            "id": s.id,
            "source_kind": s.source_kind,
            "fps": s.fps,
            "label": s.label,
            "pseudo_label": s.pseudo_label,
            "confidence": s.confidence,
        }
        meta = _frames_meta(s.frames)
        if inline_frames:
            meta["data"] = [float(v) for f in s.frames for v in f.ravel()]
        else:
            meta["offset"] = offset
            for f in s.frames:
                frame_chunks.append(f.astype("<f4").tobytes(order="C"))
                offset += f.size
        rec["frames"] = meta
        if s.feature is None:
            rec["feature"] = None
        elif header["features_file"]:
            rec["feature"] = {"row": len(feat_rows)}
            feat_rows.append(s.feature)
        else:
            rec["feature"] = [float(v) for v in s.feature]
        lines.append(json.dumps(rec, separators=(",", ":")))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    if header["frames_file"]:
        with open(path.parent / frames_name, "wb") as fh:
            fh.write(FRAME_MAGIC + struct.pack("<IQ", 1, offset))
            for chunk in frame_chunks:
                fh.write(chunk)
    if header["features_file"]:
        write_feature_file(path.parent / feat_name, np.stack(feat_rows))


def _read_frame_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FRAME_MAGIC:
        raise ManifestError(f"{path}: not an OMFR frame file")
    _, total = struct.unpack("<IQ", data[4:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != total:
        raise ManifestError(f"{path}: expected {total} floats, found {body.size}")
    return body


_REQUIRED = ("id", "source_kind", "frames")


def load_manifest(path) -> Manifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: header is not JSON ({exc})") from None
    for key in ("version", "role", "feature_dims", "class_names"):
        if key not in header:
            raise ManifestError(f"{path}:1: header missing field {key!r}")
    dims = header["feature_dims"]
    label_space = LabelSpace(tuple(header["class_names"]))
    frame_store = None
    if header.get("frames_file"):
        frame_store = _read_frame_file(path.parent / header["frames_file"])
    feat_store = None
    if header.get("features_file"):
        feat_store = read_feature_file(path.parent / header["features_file"])
        if dims is not None and feat_store.shape[1] != dims:
            raise DimensionError(
                f"{path}: feature file has {feat_store.shape[1]} dims, header says {dims}"
            )

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        for key in _REQUIRED:
            if key not in rec:
                raise ManifestError(f"{path}:{lineno}: record missing field {key!r}")
        meta = rec["frames"]
        shapes = meta.get("shapes") or [meta["shape"]] * meta.get("count", 0)
        if "data" in meta:
            flat = np.asarray(meta["data"], dtype=np.float32)
            pos = 0
        else:
            if frame_store is None and shapes:
                raise ManifestError(f"{path}:{lineno}: frames reference a missing frames_file")
            flat = frame_store
            pos = int(meta.get("offset", 0))
        frames = []
        for shp in shapes:
            n = int(np.prod(shp))
            if pos + n > flat.size:
                raise ManifestError(f"{path}:{lineno}: frame data truncated")
            frames.append(flat[pos : pos + n].reshape(shp))
            pos += n
        feat = rec.get("feature")
        if isinstance(feat, dict):
            if feat_store is None:
                raise ManifestError(f"{path}:{lineno}: feature row without features_file")
            feat = feat_store[int(feat["row"])]
        if feat is not None:
            feat = np.asarray(feat, dtype=np.float32)
            if dims is not None and feat.size != dims:
                raise DimensionError(
                    f"{path}:{lineno}: feature has {feat.size} dims, header says {dims}"
                )
        try:
            samples.append(
                Sample(
                    id=rec["id"],
                    source_kind=rec["source_kind"],
                    frames=tuple(frames),
                    fps=rec.get("fps", 1.0),
                    label=rec.get("label"),
                    pseudo_label=rec.get("pseudo_label"),
                    confidence=rec.get("confidence"),
                    feature=feat,
                )
            )
        except (ValueError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return Manifest(header["role"], label_space, samples, dims)
