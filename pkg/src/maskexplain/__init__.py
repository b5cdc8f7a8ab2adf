"""Learned perturbation masks for explaining black-box image classifiers."""

from .blackbox import BlackBox, LinearModel, RegionMeanModel, TinyCnn, generate_shape_corpus, train_tiny_cnn
from .explain import ObjectiveConfig, OptimConfig, learn_mask
from .perturb import PerturbSpec

__all__ = [
    "BlackBox",
    "LinearModel",
    "ObjectiveConfig",
    "OptimConfig",
    "PerturbSpec",
    "RegionMeanModel",
    "TinyCnn",
    "generate_shape_corpus",
    "learn_mask",
    "train_tiny_cnn",
]
