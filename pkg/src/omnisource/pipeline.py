"""End-to-end runs: dedup, teacher, filtering, transforms, joint training, evaluation.

Every stage writes its outputs under the run directory and never touches
files written by earlier stages.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import FeaturizerConfig, Manifest, featurize_manifest, load_manifest, make_rng, save_manifest
from .dedup import DedupConfig, dedup_pool
from .evaluation import evaluation_report, write_json
from .filtering import FilterConfig, filter_pool
from .inflate import InflateConfig, fit_warp_model, inflate_image, save_warp_model
from .sampler import ResampleStrategy
from .synth import SynthSpec, generate_synthetic, load_motion, save_motion, spec_to_dict
from .teacher import OptimizerConfig, save_model, train_classifier
from .trainer import MixupConfig, SamplerConfig, train_student
from .trim import ClipConfig, SnippetConfig, build_snippets, cut_clips, score_frames

log = logging.getLogger(__name__)

POOL_KINDS = ("images", "trimmed", "untrimmed")

# desk-scale optimiser defaults used by the pipeline and the CLI
DEFAULT_OPTIMIZER = dict(lr_per_sample=0.02, momentum=0.9, weight_decay=1e-3, warmup_epochs=1, epochs=40, batch_size=32)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "linear-softmax"
    hidden: int = 32
    members: int = 1
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(**DEFAULT_OPTIMIZER))


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    target: str | None = None
    validation: str | None = None
    pools: dict = field(default_factory=dict)
    motion: str | None = None
    synth: SynthSpec | None = None
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    teacher: ModelSpec = field(default_factory=ModelSpec)
    student: ModelSpec = field(default_factory=ModelSpec)
    dedup_enabled: bool = True
    dedup: DedupConfig = field(default_factory=DedupConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    reject_fraction: float | None = None
    inflate_mode: str = "warp"
    inflate_clip_len: int = 4
    inflate_scope: str = "class-agnostic"
    snippets: SnippetConfig = field(default_factory=SnippetConfig)
    clips: ClipConfig = field(default_factory=ClipConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)

    def __post_init__(self):
        unknown = set(self.pools) - set(POOL_KINDS)
        if unknown:
            raise ConfigError(f"unknown pool kinds {sorted(unknown)}; expected {POOL_KINDS}")
        if self.synth is None and (self.target is None or self.validation is None):
            raise ConfigError("config needs data.target and data.validation paths, or a [synth] section")
        paths = [p for p in (self.target, self.validation, self.motion, *self.pools.values()) if p]
        if len(paths) != len(set(paths)):
            raise ConfigError("every data path must be distinct")
        if self.reject_fraction is not None and not 0.0 <= self.reject_fraction < 1.0:
            raise ConfigError("filter.reject_fraction must be within [0, 1)")
        if self.inflate_scope not in ("class-agnostic", "class-specific"):
            raise ConfigError("inflate.scope is 'class-agnostic' or 'class-specific'")


def _take(section: dict, cls, name: str, **extra):
    """Build dataclass ``cls`` from a config table, rejecting unknown keys."""
    section = dict(section or {})
    names = {f.name for f in fields(cls)}
    bad = set(section) - names
    if bad:
        raise ConfigError(f"[{name}] unknown keys {sorted(bad)}")
    for k, v in section.items():
        if isinstance(v, list):
            section[k] = tuple(v)
    try:
        return cls(**{**section, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def _model_spec(section: dict, name: str) -> ModelSpec:
    section = dict(section or {})
    kind = section.pop("kind", "linear-softmax")
    hidden = int(section.pop("hidden", 32))
    members = int(section.pop("members", 1))
    if members < 1:
        raise ConfigError(f"[{name}] members must be >= 1")
    opt = _take({**DEFAULT_OPTIMIZER, **section}, OptimizerConfig, name)
    return ModelSpec(kind, hidden, members, opt)


def config_from_dict(d: dict, base_dir=None) -> PipelineConfig:
    """Config tables: seed, [data], [synth], [featurizer], [teacher], [student],
    [dedup], [filter], [inflate], [trim], [sampler], [mixup]."""
    known = {"seed", "data", "synth", "featurizer", "teacher", "student", "dedup", "filter", "inflate", "trim", "sampler", "mixup"}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown config sections {sorted(bad)}")
    base = Path(base_dir) if base_dir else None

    def path(p):
        if p is None:
            return None
        p = Path(p)
        return str(base / p if base and not p.is_absolute() else p)

    data = dict(d.get("data", {}))
    pools = {k: path(v) for k, v in dict(data.pop("pools", {})).items()}
    target, validation, motion = path(data.pop("target", None)), path(data.pop("validation", None)), path(data.pop("motion", None))
    if data:
        raise ConfigError(f"[data] unknown keys {sorted(data)}")
    synth = _take(d["synth"], SynthSpec, "synth") if "synth" in d else None

    dedup = dict(d.get("dedup", {}))
    dedup_enabled = bool(dedup.pop("enabled", True))
    flt = dict(d.get("filter", {}))
    reject_fraction = flt.pop("reject_fraction", None)
    inf = dict(d.get("inflate", {}))
    mode = inf.pop("mode", "warp")
    clip_len = int(inf.pop("clip_len", 4))
    scope = inf.pop("scope", "class-agnostic")
    if inf:
        raise ConfigError(f"[inflate] unknown keys {sorted(inf)}")
    trim = dict(d.get("trim", {}))
    clip_seconds = trim.pop("clip_seconds", None)
    smp = dict(d.get("sampler", {}))
    resample = smp.pop("resample", {})
    try:
        return PipelineConfig(
            seed=int(d.get("seed", 0)),
            target=target,
            validation=validation,
            pools=pools,
            motion=motion,
            synth=synth,
            featurizer=_take(d.get("featurizer"), FeaturizerConfig, "featurizer"),
            teacher=_model_spec(d.get("teacher"), "teacher"),
            student=_model_spec(d.get("student"), "student"),
            dedup_enabled=dedup_enabled,
            dedup=_take(dedup, DedupConfig, "dedup"),
            filter=_take(flt, FilterConfig, "filter"),
            reject_fraction=reject_fraction,
            inflate_mode=mode,
            inflate_clip_len=clip_len,
            inflate_scope=scope,
            snippets=_take(trim, SnippetConfig, "trim"),
            clips=ClipConfig(**({"clip_seconds": clip_seconds} if clip_seconds else {}), threshold=trim.get("threshold", 0.5)),
            sampler=_take(smp, SamplerConfig, "sampler", resample=_take(resample, ResampleStrategy, "sampler.resample")),
            mixup=_take(d.get("mixup"), MixupConfig, "mixup"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def load_config(path) -> PipelineConfig:
    """Read a TOML config; ``OMNI_SEED`` in the environment overrides ``seed``."""
    cfg = config_from_dict(load_toml(path), Path(path).parent)
    return apply_seed_override(cfg)


def apply_seed_override(cfg: PipelineConfig) -> PipelineConfig:
    env = os.environ.get("OMNI_SEED")
    if env is None or env == "":
        return cfg
    try:
        return replace(cfg, seed=int(env))
    except ValueError:
        raise ConfigError(f"OMNI_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# stages


def write_records(records, path) -> None:
    Path(path).write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))


def train_teachers(target: Manifest, spec: ModelSpec, featurizer: FeaturizerConfig, seed: int):
    """One model per ensemble member; member ``m`` trains with seed ``seed + m``."""
    feats = featurize_manifest(target, featurizer)
    return [
        train_classifier(feats, spec.optimizer, seed + m, kind=spec.kind, hidden=spec.hidden, featurizer=featurizer)[0]
        for m in range(spec.members)
    ]


def threshold_for_rejection(teachers, pool: Manifest, fraction: float, config: FilterConfig) -> float:
    """Smallest observed confidence that rejects at least ``fraction`` of ``pool``."""
    from .filtering import score_pool

    if not len(pool):
        return config.threshold
    conf = np.sort(score_pool(pool, teachers).max(axis=1))
    k = int(np.ceil(fraction * len(conf)))
    return float(conf[min(k, len(conf) - 1)]) if k < len(conf) else float(np.nextafter(conf[-1], np.inf))


def trim_pool(pool: Manifest, teachers_2d, teacher_3d, student_feat: FeaturizerConfig, snip: SnippetConfig, clips: ClipConfig, seed: int):
    """Untrimmed videos -> snippets (segment students) or clips (stack-k students)."""
    out = []
    for v in pool:
        if student_feat.consensus == "stack-k":
            out.extend(cut_clips(v, teacher_3d, clips))
        else:
            scores = score_frames(v, teachers_2d[0], snip)
            out.extend(build_snippets(v, scores, snip, make_rng(seed, "snippets", v.id)))
    return Manifest("auxiliary", pool.label_space, out)


def inflate_pool(pool: Manifest, config: InflateConfig, seed: int) -> Manifest:
    out = [inflate_image(s, config, make_rng(seed, "inflate", s.id)) for s in pool]
    return pool.with_samples(out)


def prefixed(pool_name: str, manifest: Manifest) -> list:
    return [s.with_(id=f"{pool_name}/{s.id}") for s in manifest]


@dataclass
class PipelineResult:
    model: object
    baseline: object
    records: list
    baseline_records: list
    reports: dict
    out_dir: Path


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except (StageError, ConfigError):
                raise
            except Exception as exc:
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc

        return inner

    return wrap


def _load_inputs(cfg: PipelineConfig, out: Path):
    if cfg.synth is not None:
        data = generate_synthetic(cfg.synth, cfg.seed)
        d = out / "data"
        d.mkdir(parents=True, exist_ok=True)
        save_manifest(data.target, d / "target.jsonl")
        save_manifest(data.validation, d / "validation.jsonl")
        for k, m in data.pools.items():
            save_manifest(m, d / f"pool_{k}.jsonl")
        save_motion(d / "motion.json", data.motion, data.motion_classes)
        (d / "truth.json").write_text(json.dumps(data.truth, sort_keys=True) + "\n")
        (d / "synth_spec.json").write_text(json.dumps({"seed": cfg.seed, **spec_to_dict(cfg.synth)}, sort_keys=True) + "\n")
        pools = {k: m for k, m in data.pools.items() if len(m)}
        return data.target, data.validation, pools, (data.motion, data.motion_classes)
    target = load_manifest(cfg.target)
    validation = load_manifest(cfg.validation)
    pools = {k: load_manifest(p) for k, p in cfg.pools.items()}
    motion = load_motion(cfg.motion) if cfg.motion else None
    return target, validation, pools, motion


def run_pipeline(cfg: PipelineConfig, out_dir) -> PipelineResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    reports = {}

    target, validation, pools, motion = _stage("load")(_load_inputs)(cfg, out)
    if target.role != "target" or validation.role != "validation":
        raise StageError("load", "target/validation manifests have the wrong roles")
    for name, p in pools.items():
        if p.label_space != target.label_space:
            raise StageError("load", f"pool {name} label space differs from target")

    # de-duplication against everything used for training or evaluation
    if cfg.dedup_enabled:
        for name in list(pools):
            clean, rep = _stage(f"dedup:{name}")(dedup_pool)(pools[name], [target, validation], cfg.dedup)
            save_manifest(clean, out / f"dedup_{name}.jsonl")
            write_json(rep.to_dict(), out / f"dedup_{name}.report.json")
            reports[f"dedup_{name}"] = {"threshold": rep.threshold, "flagged": rep.flagged_count}
            pools[name] = clean

    # teachers: 2D (segment-average) always; a stack-k teacher only for clip students
    teacher_feat = FeaturizerConfig(grid=cfg.featurizer.grid, consensus="segment-average")
    teachers = _stage("teacher")(train_teachers)(target, cfg.teacher, teacher_feat, seed)
    for m, t in enumerate(teachers):
        save_model(t, out / f"teacher_{m}.omdl")
    teacher_3d = None
    if cfg.featurizer.consensus == "stack-k" and "untrimmed" in pools:
        feat3 = replace(cfg.featurizer, consensus="stack-k")
        teacher_3d = _stage("teacher")(train_teachers)(target, replace(cfg.teacher, members=1), feat3, seed)[0]
        save_model(teacher_3d, out / "teacher_3d.omdl")

    # filtering and per-source transforms
    student_feat = cfg.featurizer
    aux_samples = []
    for name in POOL_KINDS:
        if name not in pools:
            continue
        pool = pools[name]
        if name == "untrimmed":
            kept = _stage("trim")(trim_pool)(pool, teachers, teacher_3d, student_feat, cfg.snippets, cfg.clips, seed)
            save_manifest(kept, out / f"trim_{name}.jsonl")
            reports[f"trim_{name}"] = {"videos": len(pool), "units": len(kept)}
        else:
            fcfg = replace(cfg.filter, teacher_kind="2d")
            if cfg.reject_fraction is not None:
                th = _stage(f"filter:{name}")(threshold_for_rejection)(teachers, pool, cfg.reject_fraction, fcfg)
                fcfg = replace(fcfg, threshold=min(th, 1.0))
            kept, rep = _stage(f"filter:{name}")(filter_pool)(pool, teachers, fcfg)
            save_manifest(kept, out / f"filter_{name}.jsonl")
            rd = {**rep.to_dict(), "threshold": fcfg.threshold}
            write_json(rd, out / f"filter_{name}.report.json")
            reports[f"filter_{name}"] = rd
            if name == "images":
                kept = _stage("inflate")(_inflate_stage)(kept, cfg, motion, out)
                save_manifest(kept, out / f"inflate_{name}.jsonl")
        aux_samples.extend(prefixed(name, kept))

    aux = Manifest("auxiliary", target.label_space, aux_samples)
    aux = _stage("featurize")(featurize_manifest)(aux, student_feat)
    save_manifest(aux, out / "auxiliary.jsonl", external_features=True)
    tgt = featurize_manifest(target, student_feat)
    val = featurize_manifest(validation, student_feat)

    def student(a):
        sp = cfg.student
        return train_student(
            tgt, a, sp.optimizer, cfg.sampler, cfg.mixup, val, seed, kind=sp.kind, hidden=sp.hidden, featurizer=student_feat
        )

    baseline, base_records = _stage("train:baseline")(student)(None)
    model, records = _stage("train:student")(student)(aux if len(aux) else None)
    save_model(baseline, out / "baseline.omdl")
    save_model(model, out / "student.omdl")
    write_records(base_records, out / "baseline.log.jsonl")
    write_records(records, out / "student.log.jsonl")

    ev = _stage("eval")(evaluation_report)(model, val, baseline)
    write_json(ev, out / "eval.json")
    reports["eval"] = {k: ev[k] for k in ("top1", "top5", "baseline_top1", "baseline_top5")}
    reports["auxiliary_size"] = len(aux)
    reports["seed"] = seed
    write_json(reports, out / "summary.json")
    return PipelineResult(model, baseline, records, base_records, reports, out)


def _inflate_stage(kept: Manifest, cfg: PipelineConfig, motion, out: Path) -> Manifest:
    warp = None
    if cfg.inflate_mode == "warp":
        if motion is None:
            raise ValueError("warp inflation needs camera-motion homographies (data.motion)")
        seqs, classes = motion
        warp = fit_warp_model(seqs)
        save_warp_model(warp, out / "warp_model.json")
    if cfg.inflate_mode == "warp" and cfg.inflate_scope == "class-specific":
        # one model per pseudo class; classes without motion data fall back to the agnostic fit
        seqs, classes = motion
        models = {}
        for c in sorted(set(classes)):
            models[c] = fit_warp_model(seqs, "class-specific", classes, c)
        out_samples = []
        for s in kept:
            icfg = InflateConfig("warp", cfg.inflate_clip_len, warp_model=models.get(s.pseudo_label, warp))
            out_samples.append(inflate_image(s, icfg, make_rng(cfg.seed, "inflate", s.id)))
        return kept.with_samples(out_samples)
    icfg = InflateConfig(cfg.inflate_mode, cfg.inflate_clip_len, warp_model=warp)
    return inflate_pool(kept, icfg, cfg.seed)


def synth_config(spec: SynthSpec | None = None, seed: int = 0, **overrides) -> PipelineConfig:
    """A pipeline config that generates its own synthetic data."""
    return PipelineConfig(seed=seed, synth=spec or SynthSpec(), **overrides)

