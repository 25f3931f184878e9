"""Contextual-bias mitigation for multi-label image classifiers."""

from .bias import BiasedPair, PredictionMatrix, bias, bias_matrix, identify_pairs
from .data import (DataError, LabeledDataset, SyntheticConfig, generate_synthetic,
                   image_sets_for_pair, load_annotations)
from .evaluation import EvalReport, average_precision, evaluate, top3_recall
from .model import MultiLabelNet, build_model, compute_cam, load_checkpoint, save_checkpoint
from .training import MethodSpec, TrainConfig, train_stage2, train_standard

__version__ = "0.1.0"
