"""Dual-branch (global + local) fusion classifier with saliency extraction and XAI scoring.

Submodules
----------
dataio      manifests, patient-grouped folds, image/mask loading, augmentation
backbones   ResNet-style global and BagNet-style local feature extractors
fusion      attention gate, concatenation and product fusion, decision vector
model       the assembled three-head network
training    weighted joint loss, per-branch optimisers, cross-validation, checkpoints
saliency    saliency maps from features or attention, overlays, export format
xaimetrics  RMA/RRA coherence, MoRF/LeRF deletion curves, degradation scores
harness     classification metrics, reports, configuration and the CLI
"""
from .backbones import BackboneConfig, BackboneKind, Branch, build_extractor
from .dataio import DatasetManifest, FoldAssignment, SampleRecord, assign_patient_folds, load_manifest
from .fusion import FusionStrategy, GateNorm
from .model import DualBranchNet, ModelConfig
from .saliency import SaliencyMap, SaliencySource
from .training import TrainConfig, load_checkpoint, save_checkpoint, train_fold
from .xaimetrics import Direction, TiePolicy, class_adjusted_ds, degradation_score, rma, rra

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BackboneKind", "Branch", "build_extractor",
    "DatasetManifest", "FoldAssignment", "SampleRecord", "assign_patient_folds", "load_manifest",
    "FusionStrategy", "GateNorm", "DualBranchNet", "ModelConfig",
    "SaliencyMap", "SaliencySource",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train_fold",
    "Direction", "TiePolicy", "class_adjusted_ds", "degradation_score", "rma", "rra",
]
