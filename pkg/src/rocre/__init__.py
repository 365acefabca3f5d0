"""Relation extraction as contrastive retrieval over relation descriptions."""

from .dataio import Instance, RelationCatalog, Vocab, load_corpus, load_relation_catalog
from .infer import Metrics, Prediction, compute_metrics, evaluate, predict, predict_restricted
from .model import ModelConfig, RocModel
from .pair_encoder import EncoderConfig
from .rel_encoder import RelEncoderConfig
from .synthetic import SynthConfig, generate_synthetic
from .trainer import TrainConfig, TrainReport, contrastive_loss, run_ablation_suite, sweep_depth, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "Instance",
    "Metrics",
    "ModelConfig",
    "Prediction",
    "RelEncoderConfig",
    "RelationCatalog",
    "RocModel",
    "SynthConfig",
    "TrainConfig",
    "TrainReport",
    "Vocab",
    "compute_metrics",
    "contrastive_loss",
    "evaluate",
    "generate_synthetic",
    "load_corpus",
    "load_relation_catalog",
    "predict",
    "predict_restricted",
    "run_ablation_suite",
    "sweep_depth",
    "train",
]
