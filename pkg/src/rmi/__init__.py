"""Renormalized mutual information for feature extraction from continuous data."""

from .core import (
    DegenerateFeatureError,
    NoiseMetric,
    RmiEstimate,
    compute_rmi,
    compute_rmi_epsilon,
    inequality_gap,
    information_loss_identity,
)
from .entropy import GridPolicy, GridSpec, entropy, kl_to_gaussian
from .features import Handcrafted, Linear, Mlp, Stacked, feature_jacobian, feature_value, pca_fit
from .training import TrainingConfig, preset, total_cost, train_feature

__version__ = "0.1.0"

__all__ = [
    "DegenerateFeatureError", "NoiseMetric", "RmiEstimate", "compute_rmi", "compute_rmi_epsilon",
    "inequality_gap", "information_loss_identity", "GridPolicy", "GridSpec", "entropy",
    "kl_to_gaussian", "Handcrafted", "Linear", "Mlp", "Stacked", "feature_jacobian",
    "feature_value", "pca_fit", "TrainingConfig", "preset", "total_cost", "train_feature",
]
