"""Webly-supervised training at desk scale.

Teachers trained on a labeled target set filter web pools of images, trimmed
clips and untrimmed videos; kept samples are turned into the target format
and a student is trained jointly on target and auxiliary batches.
"""

from .core import (
    DimensionError,
    FeaturizerConfig,
    LabelSpace,
    Manifest,
    ManifestError,
    RngStream,
    Sample,
    featurize,
    featurize_manifest,
    load_manifest,
    make_rng,
    save_manifest,
)
from .dedup import DedupConfig, DedupReport, dedup_pool, derive_threshold, whiten
from .evaluation import ConfusionReport, confusion_delta, confusion_matrix, confusion_score, top_k_accuracy
from .filtering import FilterConfig, FilterReport, class_distribution, filter_pool
from .inflate import (
    Homography,
    InflateConfig,
    WarpModel,
    apply_homography,
    fit_warp_model,
    inflate_image,
    sample_homography,
)
from .pipeline import PipelineConfig, load_config, run_pipeline
from .sampler import BatchPlan, ResampleStrategy, class_weights, draw_auxiliary, schedule
from .synth import SynthSpec, generate_synthetic
from .teacher import (
    ClassifierModel,
    OptimizerConfig,
    ensemble_proba,
    load_model,
    predict_proba,
    save_model,
    train_classifier,
)
from .trainer import MixupConfig, SamplerConfig, TrainRecord, joint_loss, mixup_pair, train_student
from .trim import ClipConfig, SnippetConfig, build_snippets, cut_clips, score_frames

__version__ = "0.1.0"
