"""Cloth-changing person re-identification with tri-stream mutual learning."""

__version__ = "0.1.0"

from .datamodel import (DatasetIndex, ImageSample, IndexEntry, LabelVocabulary,
                        default_vocabulary, load_index, load_sample)
from .losses import LossConfig, total_loss
from .network import BackboneConfig, TriStreamNet, build_model, load_checkpoint, save_checkpoint
from .preprocess import AugmentConfig, augment, build_part_masks, erase_clothing
from .evalproto import evaluate, cmc_map, distance_matrix
from .synthdata import SynthConfig, generate
from .train import TrainConfig, train

__all__ = [
    "AugmentConfig", "BackboneConfig", "DatasetIndex", "ImageSample",
    "IndexEntry", "LabelVocabulary", "LossConfig", "SynthConfig",
    "TrainConfig", "TriStreamNet", "augment", "build_model",
    "build_part_masks", "cmc_map", "default_vocabulary", "distance_matrix",
    "erase_clothing", "evaluate", "generate", "load_checkpoint", "load_index",
    "load_sample", "save_checkpoint", "total_loss", "train",
]
