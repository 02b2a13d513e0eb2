"""Modality-adaptive medical image re-identification.

A ViT-style backbone whose attention and FFN weights receive per-image
low-rank amendments generated from a modality encoding, trained with
identity losses plus a teacher feature-difference alignment term.
"""

from .backbone import Backbone, BackboneConfig
from .compa import ComPA, CompaConfig
from .config import RunConfig
from .data import DatasetManifest, ImageRecord, SynthConfig, generate_synthetic, load_manifest
from .med_prior import MedConfig, TeacherRegistry, med_align_loss
from .model import MedReID, load_model
from .retrieval import cmc_rank_k, evaluate
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "ComPA",
    "CompaConfig",
    "DatasetManifest",
    "ImageRecord",
    "MedConfig",
    "MedReID",
    "RunConfig",
    "SynthConfig",
    "TeacherRegistry",
    "TrainConfig",
    "cmc_rank_k",
    "evaluate",
    "generate_synthetic",
    "load_manifest",
    "load_model",
    "med_align_loss",
    "train_loop",
]
