"""Point cloud semantic segmentation for shell construction scenes.

Pure NumPy/SciPy stack: deterministic preprocessing, a local-attention
encoder/decoder with hand-written exact gradients, label-space translation
between datasets, fragment-voting evaluation, and a synthetic scene
generator for end-to-end desk-scale experiments.
"""

from .augment import (AugmentConfig, ChromaticConfig, GeometricConfig,
                      TtaConfig, apply_chromatic, apply_geometric,
                      tta_instances)
from .cloud import (IGNORE_LABEL, ClassStats, DatasetManifest, PointCloud,
                    class_statistics, distance_filter, neighborhood_density,
                    validate_labels)
from .config import ConfigError, RunConfig
from .estimator import ShellSegmenter
from .evaluation import (ConfusionMatrix, MetricsReport, VoteBuffer,
                         accumulate, cross_domain_eval, fast_eval, metrics,
                         point_features, precise_test)
from .io import (FormatError, detect_format, load_manifest, load_pointcloud,
                 save_manifest, save_pointcloud)
from .labels import (DEFAULT_ALIASES, SHELL_CLASSES, LabelSpace,
                     OverlapMatrix, TranslationMap, build_translation,
                     canonical, get_label_space, load_aliases,
                     load_label_space, overlap_matrix, save_aliases,
                     save_label_space, translate_labels)
from .losses import cross_entropy, lovasz_softmax, softmax, total_loss
from .network import (CheckpointError, Model, ModelConfig, build_model,
                      load_checkpoint, reinit_head, save_checkpoint)
from .optim import (AdamWConfig, AdamWState, OneCycleConfig, adamw_step,
                    onecycle_lr)
from .render import class_palette, class_stats_chart, render_panorama, save_png
from .sampling import (Fragment, SampleIndex, as_rng, fragment_partition,
                       knn, sphere_crop, voxel_grid_sample, voxel_ids)
from .synth import (PALETTE, Primitive, SceneSpec, generate_dataset,
                    generate_scene, split_sizes)
from .training import (BASELINE_MAX_LR, FINETUNE_MAX_LR, TrainConfig,
                       TrainHistory, TrainingDiverged, finetune, train)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "ChromaticConfig", "GeometricConfig", "TtaConfig",
    "apply_chromatic", "apply_geometric", "tta_instances",
    "IGNORE_LABEL", "ClassStats", "DatasetManifest", "PointCloud",
    "class_statistics", "distance_filter", "neighborhood_density",
    "validate_labels",
    "ConfigError", "RunConfig",
    "ShellSegmenter",
    "ConfusionMatrix", "MetricsReport", "VoteBuffer", "accumulate",
    "cross_domain_eval", "fast_eval", "metrics", "point_features",
    "precise_test",
    "FormatError", "detect_format", "load_manifest", "load_pointcloud",
    "save_manifest", "save_pointcloud",
    "DEFAULT_ALIASES", "SHELL_CLASSES", "LabelSpace", "OverlapMatrix",
    "TranslationMap", "build_translation", "canonical", "get_label_space",
    "load_aliases", "load_label_space", "overlap_matrix", "save_aliases",
    "save_label_space", "translate_labels",
    "cross_entropy", "lovasz_softmax", "softmax", "total_loss",
    "CheckpointError", "Model", "ModelConfig", "build_model",
    "load_checkpoint", "reinit_head", "save_checkpoint",
    "AdamWConfig", "AdamWState", "OneCycleConfig", "adamw_step",
    "onecycle_lr",
    "class_palette", "class_stats_chart", "render_panorama", "save_png",
    "Fragment", "SampleIndex", "as_rng", "fragment_partition", "knn",
    "sphere_crop", "voxel_grid_sample", "voxel_ids",
    "PALETTE", "Primitive", "SceneSpec", "generate_dataset",
    "generate_scene", "split_sizes",
    "BASELINE_MAX_LR", "FINETUNE_MAX_LR", "TrainConfig", "TrainHistory",
    "TrainingDiverged", "finetune", "train",
]
