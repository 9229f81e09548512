"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .core import FeaturizerConfig, Manifest, featurize, load_manifest, save_manifest
from .dedup import DedupConfig, dedup_pool
from .evaluation import confusion_delta, confusion_matrix, evaluation_report, write_json
from .filtering import FilterConfig, filter_pool
from .inflate import InflateConfig, fit_warp_model, load_warp_model, save_warp_model
from .pipeline import (
    ConfigError,
    StageError,
    _model_spec,
    _take,
    apply_seed_override,
    inflate_pool,
    load_config,
    load_toml,
    run_pipeline,
    threshold_for_rejection,
    trim_pool,
    write_records,
)
from .synth import SynthSpec, generate_synthetic, load_motion, save_motion, spec_to_dict
from .sampler import ResampleStrategy
from .teacher import load_model, save_model, train_classifier
from .trainer import MixupConfig, SamplerConfig, train_student
from .trim import ClipConfig, SnippetConfig

log = logging.getLogger("omnisource")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed(args, default=0) -> int:
    env = os.environ.get("OMNI_SEED")
    if env:
        return int(env)
    return args.seed if getattr(args, "seed", None) is not None else default


def with_features(m: Manifest, featurizer: FeaturizerConfig) -> Manifest:
    """Re-featurize every sample that has frames; feature-only samples are kept as stored."""
    return m.with_samples([s.with_(feature=featurize(s, featurizer)) if s.frames else s for s in m])


def _featurizer(d: dict) -> FeaturizerConfig:
    return _take(d.get("featurizer"), FeaturizerConfig, "featurizer")


def _config(path) -> dict:
    return load_toml(path) if path else {}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args):
    d = _config(args.config)
    spec = _take(d.get("synth", d), SynthSpec, "synth")
    seed = _seed(args, int(d.get("seed", 0)) if "synth" in d else 0)
    data = generate_synthetic(spec, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(data.target, out / "target.jsonl")
    save_manifest(data.validation, out / "validation.jsonl")
    for k, m in data.pools.items():
        save_manifest(m, out / f"pool_{k}.jsonl")
    save_motion(out / "motion.json", data.motion, data.motion_classes)
    (out / "truth.json").write_text(json.dumps(data.truth, sort_keys=True) + "\n")
    (out / "synth_spec.json").write_text(json.dumps({"seed": seed, **spec_to_dict(spec)}, sort_keys=True) + "\n")
    print(f"wrote synthetic data (seed {seed}) to {out}")


def cmd_dedup(args):
    pool = load_manifest(args.pool)
    refs = [load_manifest(p) for p in args.refs.split(",") if p]
    cfg = DedupConfig(threshold_override=args.threshold, crops_per_frame=args.crops, seed=_seed(args))
    clean, rep = dedup_pool(pool, refs, cfg)
    save_manifest(clean, args.out)
    write_json(rep.to_dict(), args.report)
    print(f"flagged {rep.flagged_count} of {len(pool)} (threshold {rep.threshold:.4f})")


def cmd_train_teacher(args):
    d = _config(args.config)
    spec = _model_spec(d.get("teacher"), "teacher")
    feat = _featurizer(d)
    if args.consensus:
        feat = FeaturizerConfig(feat.grid, args.consensus, feat.stack_k)
    target = with_features(load_manifest(args.data), feat)
    model, losses = train_classifier(target, spec.optimizer, _seed(args, int(d.get("seed", 0))), kind=spec.kind, hidden=spec.hidden, featurizer=feat)
    save_model(model, args.out_model)
    print(f"final training loss {losses[-1] if losses else float('nan'):.6f}")


def cmd_filter(args):
    pool = load_manifest(args.pool)
    teachers = [load_model(p) for p in args.teacher.split(",") if p]
    cfg = FilterConfig(threshold=args.threshold, teacher_kind=args.teacher_kind, per_frame=args.per_frame)
    if args.reject_fraction is not None:
        cfg = FilterConfig(min(threshold_for_rejection(teachers, pool, args.reject_fraction, cfg), 1.0), cfg.teacher_kind, cfg.per_frame)
    kept, rep = filter_pool(pool, teachers, cfg)
    save_manifest(kept, args.out)
    write_json({**rep.to_dict(), "threshold": cfg.threshold}, args.report)
    print(f"kept {rep.kept} of {rep.pool_size} (rejection rate {rep.rejection_rate:.3f})")


def cmd_inflate(args):
    m = load_manifest(args.inp)
    warp = None
    if args.mode == "warp":
        if args.warp_model:
            warp = load_warp_model(args.warp_model)
        elif args.motion:
            seqs, classes = load_motion(args.motion)
            warp = fit_warp_model(seqs)
            if args.save_warp_model:
                save_warp_model(warp, args.save_warp_model)
        else:
            raise ValueError("warp mode needs --warp-model or --motion")
    cfg = InflateConfig(args.mode, args.clip_len, warp_model=warp)
    out = inflate_pool(m, cfg, _seed(args))
    save_manifest(out, args.out)
    print(f"inflated {len(out)} images into {args.clip_len}-frame clips")


def cmd_trim(args):
    m = load_manifest(args.inp)
    t = load_model(args.teacher)
    snip = SnippetConfig(sample_fps=args.sample_fps, threshold=args.threshold, n_pos=args.n_pos, n_neg=args.n_neg)
    clips = ClipConfig(clip_seconds=args.clip_seconds, threshold=args.threshold)
    feat = t.featurizer if args.unit == "clips" else FeaturizerConfig(consensus="segment-average")
    out = trim_pool(m, [t], t, feat, snip, clips, _seed(args))
    save_manifest(out, args.out)
    print(f"{len(out)} {args.unit} from {len(m)} videos")


def _training_setup(d: dict):
    spec = _model_spec(d.get("student"), "student")
    smp = dict(d.get("sampler", {}))
    resample = smp.pop("resample", {})
    sampler = _take(smp, SamplerConfig, "sampler", resample=_take(resample, ResampleStrategy, "sampler.resample"))
    mixup = _take(d.get("mixup"), MixupConfig, "mixup")
    return spec, sampler, mixup, _featurizer(d)


def cmd_train(args):
    d = _config(args.config)
    spec, sampler, mixup, feat = _training_setup(d)
    target = with_features(load_manifest(args.target), feat)
    aux = with_features(load_manifest(args.aux), feat) if args.aux else None
    val = with_features(load_manifest(args.val), feat) if args.val else None
    seed = _seed(args, int(d.get("seed", 0)))
    model, records = train_student(target, aux, spec.optimizer, sampler, mixup, val, seed, kind=spec.kind, hidden=spec.hidden, featurizer=feat)
    save_model(model, args.out_model)
    if args.log:
        write_records(records, args.log)
    if records and records[-1].val_top1 is not None:
        print(f"validation top-1 {records[-1].val_top1:.4f}")


def cmd_eval(args):
    model = load_model(args.model)
    data = load_manifest(args.data)
    base = load_model(args.baseline_model) if args.baseline_model else None
    rep = evaluation_report(model, data.with_samples([s.with_(feature=None) if s.frames else s for s in data]), base)
    write_json(rep, args.report)
    print(f"top-1 {rep['top1']:.4f} top-5 {rep['top5']:.4f}")


def cmd_report_confusion(args):
    model = load_model(args.model)
    base = load_model(args.baseline_model)
    data = load_manifest(args.data)
    data = data.with_samples([s.with_(feature=None) if s.frames else s for s in data])
    rep = confusion_delta(confusion_matrix(model, data), confusion_matrix(base, data), args.model, args.baseline_model)
    write_json(rep.to_dict(), args.report)
    for i, j, dlt in rep.most_improved:
        print(f"{i}-{j}\t{dlt:+.4f}")


def cmd_pipeline(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = apply_seed_override(replace(cfg, seed=args.seed))
    res = run_pipeline(cfg, args.out)
    ev = res.reports["eval"]
    print(f"student top-1 {ev['top1']:.4f} (baseline {ev['baseline_top1']:.4f}); outputs in {res.out_dir}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="omnisource", description="Webly-supervised training pipeline at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-synth", help="generate synthetic target/validation sets and web pools")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="TOML with SynthSpec keys (top level or a [synth] table)")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_gen_synth)

    s = sub.add_parser("dedup", help="remove pool samples duplicating reference frames")
    s.add_argument("--pool", required=True)
    s.add_argument("--refs", required=True, help="comma-separated reference manifests")
    s.add_argument("--threshold", type=float)
    s.add_argument("--crops", type=int, default=4)
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_dedup)

    s = sub.add_parser("train-teacher", help="train a classifier on a target manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--consensus", choices=["segment-average", "stack-k"])
    s.add_argument("--out-model", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train_teacher)

    s = sub.add_parser("filter", help="teacher filtering of a web pool")
    s.add_argument("--pool", required=True)
    s.add_argument("--teacher", required=True, help="comma-separated model files (ensemble)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--reject-fraction", type=float)
    s.add_argument("--teacher-kind", choices=["2d", "3d"], default="2d")
    s.add_argument("--per-frame", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_filter)

    s = sub.add_parser("inflate", help="turn images into pseudo clips")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--mode", choices=["replicate", "translate-random", "translate-constant", "warp"], default="warp")
    s.add_argument("--clip-len", type=int, default=4)
    s.add_argument("--warp-model")
    s.add_argument("--motion", help="camera-motion homography file to fit a warp model from")
    s.add_argument("--save-warp-model")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_inflate)

    s = sub.add_parser("trim", help="untrimmed videos to snippets or clips")
    s.add_argument("unit", choices=["snippets", "clips"])
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--sample-fps", type=float, default=1.0)
    s.add_argument("--n-pos", type=int, default=1)
    s.add_argument("--n-neg", type=int, default=2)
    s.add_argument("--clip-seconds", type=float, default=10.0)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_trim)

    s = sub.add_parser("train", help="joint training on target and auxiliary data")
    s.add_argument("--target", required=True)
    s.add_argument("--aux")
    s.add_argument("--val")
    s.add_argument("--config")
    s.add_argument("--out-model", required=True)
    s.add_argument("--log")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="accuracy and confusion report")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--baseline-model")
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("report-confusion", help="confusion-score deltas between two models")
    s.add_argument("--model", required=True)
    s.add_argument("--baseline-model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_report_confusion)
    return p


def _is_invalid_input(exc: BaseException) -> bool:
    cause = exc.__cause__ if isinstance(exc, StageError) and exc.__cause__ is not None else exc
    return isinstance(cause, (ValueError, KeyError, FileNotFoundError, IsADirectoryError, UsageError))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = EXIT_INVALID if _is_invalid_input(exc) else EXIT_RUNTIME
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
