"""Gradient saliency maps for point clouds and the point-dropping experiments built on them."""

from pcsaliency.data import LabeledCloud, ShapeSpec, generate_shapes
from pcsaliency.dropping import DropConfig, DropResult, brute_force_contribution, critical_counts, run_drop
from pcsaliency.model import ModelParams, TrainConfig, forward, load_checkpoint, loss, save_checkpoint, train
from pcsaliency.saliency import SaliencyConfig, SaliencyMap, saliency_scores, spherical_core

__all__ = [
    "DropConfig",
    "DropResult",
    "LabeledCloud",
    "ModelParams",
    "SaliencyConfig",
    "SaliencyMap",
    "ShapeSpec",
    "TrainConfig",
    "brute_force_contribution",
    "critical_counts",
    "forward",
    "generate_shapes",
    "load_checkpoint",
    "loss",
    "run_drop",
    "saliency_scores",
    "save_checkpoint",
    "spherical_core",
    "train",
]
