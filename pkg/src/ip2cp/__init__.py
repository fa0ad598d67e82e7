"""Damage-assessment toolkit: fuse registered pre/post disaster images into
single change images, mine balanced binary-labeled patches, train a small
Siamese convolutional embedder under a contrastive loss, classify patches
with a linear SVM over the embedding, and evaluate with F1 / confusion
metrics. A built-in synthetic-scene generator provides exact ground truth
for end-to-end verification at desk scale.
"""

from .classifier import SvmConfig, SvmModel, fit_svm, load_svm, predict_patch, save_svm, svm_predict
from .encoder import Ip2cpImage, ip2cp_encode, norm_minmax
from .embedder import (
    ArchConfig,
    EmbedderNet,
    Embedding,
    TrainConfig,
    TrainStats,
    contrastive_loss,
    embed_all,
    forward,
    init_net,
    load_net,
    loss_and_grad,
    sample_pairs,
    save_net,
    train,
)
from .ingest import LabeledPolygon, Manifest, ManifestEntry, load_manifest, parse_label_json, rasterize
from .metrics import ConfusionMatrix, confusion, f1_binary, f1_pixelwise, row_normalize
from .patches import (
    AugmentSpec,
    LabeledPatch,
    MinerConfig,
    StatsRow,
    assign_patch_label,
    augment,
    erase_other_class,
    mine_patches,
    sweep_patch_stats,
)
from .raster import (
    BinaryLabel,
    DamageLabel,
    LabelMask,
    RasterImage,
    binarize_label,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from .synth import Building, Scene, SceneConfig, generate_scene, make_dataset

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "AugmentSpec", "BinaryLabel", "Building", "ConfusionMatrix",
    "DamageLabel", "EmbedderNet", "Embedding", "Ip2cpImage", "LabelMask",
    "LabeledPatch", "LabeledPolygon", "Manifest", "ManifestEntry", "MinerConfig",
    "RasterImage", "Scene", "SceneConfig", "StatsRow", "SvmConfig", "SvmModel",
    "TrainConfig", "TrainStats", "assign_patch_label", "augment", "binarize_label",
    "confusion", "contrastive_loss", "embed_all", "erase_other_class", "f1_binary",
    "f1_pixelwise", "fit_svm", "forward", "generate_scene", "init_net",
    "ip2cp_encode", "load_image", "load_manifest", "load_mask", "load_net",
    "load_svm", "loss_and_grad", "make_dataset", "mine_patches", "norm_minmax",
    "parse_label_json", "predict_patch", "rasterize", "row_normalize",
    "sample_pairs", "save_image", "save_mask", "save_net", "save_svm",
    "svm_predict", "sweep_patch_stats", "train",
]
