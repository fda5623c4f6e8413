"""Multi-stage hybrid CNN-Transformer classifier with focus-guided decoders."""

from .archive import LoadReport, load_archive, save_archive
from .attention import CBAMBlock, SEBlock, SimAM, simam
from .backbone import (BackboneConfig, StagedBackbone, StageFeatures, build_backbone,
                       full_backbone_config, load_pretrained_backbone, tiny_backbone_config)
from .datapipe import (AugmentConfig, FoldPlan, LabeledImage, SynthSpec, augment_train,
                       ingest_directory, preprocess_eval, split_folds, synth_generate)
from .explain import CamHeatmap, grad_cam, overlay
from .fgd import (FgdConfig, GuidancePair, MultiStageHybridTransformer, SharedEmbeddings,
                  StackedHybridTransformer, VARIANT_NAMES, build_variant, count_parameters,
                  load_checkpoint, save_checkpoint)
from .trainer import (ConfusionCounts, FoldData, FoldResults, Hyperparams, MetricsReport,
                      aggregate_folds, compute_metrics, cosine_lr, evaluate, run_experiment,
                      train_fold)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BackboneConfig", "CBAMBlock", "CamHeatmap", "ConfusionCounts",
    "FgdConfig", "FoldData", "FoldPlan", "FoldResults", "GuidancePair", "Hyperparams",
    "LabeledImage", "LoadReport", "MetricsReport", "MultiStageHybridTransformer",
    "SEBlock", "SharedEmbeddings", "SimAM", "StackedHybridTransformer", "StagedBackbone",
    "StageFeatures", "SynthSpec", "VARIANT_NAMES", "aggregate_folds", "augment_train",
    "build_backbone", "build_variant", "compute_metrics", "cosine_lr", "count_parameters",
    "evaluate", "full_backbone_config", "grad_cam", "ingest_directory", "load_archive",
    "load_checkpoint", "load_pretrained_backbone", "overlay", "preprocess_eval",
    "run_experiment", "save_archive", "save_checkpoint", "simam", "split_folds",
    "synth_generate", "tiny_backbone_config", "train_fold",
]
