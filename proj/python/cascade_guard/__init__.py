"""Adversarial detection from convolutional filter statistics."""

from ._core import (
    AdversarialRecord,
    ArgumentError,
    CascadeDecision,
    Dataset,
    Detector,
    FormatError,
    Network,
    NumericError,
    OmegaCalibration,
    Prediction,
    ShapeError,
    attack,
    average_filter,
    calibrate_omega,
    evolve,
    extremal_stats,
    feature_names,
    fit_detector,
    load_adversarials,
    load_idx,
    percentile_stats,
    recovery_accuracy,
    roc_auc,
    save_adversarials,
    should_predict,
    synth_dataset,
    train_victim,
)

__all__ = [
    "AdversarialRecord",
    "ArgumentError",
    "CascadeDecision",
    "Dataset",
    "Detector",
    "FormatError",
    "Network",
    "NumericError",
    "OmegaCalibration",
    "Prediction",
    "ShapeError",
    "attack",
    "average_filter",
    "calibrate_omega",
    "evolve",
    "extremal_stats",
    "feature_names",
    "fit_detector",
    "load_adversarials",
    "load_idx",
    "percentile_stats",
    "recovery_accuracy",
    "roc_auc",
    "save_adversarials",
    "should_predict",
    "synth_dataset",
    "train_victim",
]
