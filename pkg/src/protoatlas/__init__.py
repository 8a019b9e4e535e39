"""Prototype-evidence image classification: training with a diversity cost,
prototype projection, evidence-panel explanations, prototype-quality
analytics, calibrated high-confidence serving, and a feedback loop."""

__version__ = "0.1.0"

from .calibration import Calibrator, apply_calibrator, fit
from .dataset import (AugmentationRecipe, DatasetIndex, ImageEntry, Instrument,
                      Split, augment, load_manifest, recipe_for_instrument,
                      sol_split)
from .losses import LossBreakdown, LossWeights, total_loss
from .model import (FeatureMap, ModelConfig, ProtoPartsModel, Prototype,
                    extract_features, forward, project_prototypes, similarity,
                    visualize_test_prototypes)
from .training import TrainConfig, TrainState, last_layer_tune, train

__all__ = [
    "AugmentationRecipe", "Calibrator", "DatasetIndex", "FeatureMap",
    "ImageEntry", "Instrument", "LossBreakdown", "LossWeights", "ModelConfig",
    "ProtoPartsModel", "Prototype", "Split", "TrainConfig", "TrainState",
    "apply_calibrator", "augment", "extract_features", "fit", "forward",
    "last_layer_tune", "load_manifest", "project_prototypes",
    "recipe_for_instrument", "similarity", "sol_split", "total_loss", "train",
    "visualize_test_prototypes",
]
