"""Latent-predictive pre-training for genomic sequence encoders.

A context encoder learns from two coupled objectives: recovering masked
token spans, and predicting (through a small latent predictor) the
aggregate embedding that an EMA-tracked target encoder assigns to the
unmasked sequence, with variance/covariance regularization holding the
embedding space open. Ships with a FASTA chunking pipeline, a BPE
tokenizer, linear-probe and zero-shot evaluation, and a CLI.
"""

__version__ = "0.1.0"

from .losses import LossBreakdown, LossWeights
from .masking import MaskConfig, MaskPlan
from .model import JepaModel, ModelConfig, init_weights
from .sequences import Chunk, SequenceRecord, SyntheticSpec
from .tokenizer import TokenizedSample, TokenizerModel
from .trainer import TrainConfig, Trainer

__all__ = [
    "Chunk",
    "JepaModel",
    "LossBreakdown",
    "LossWeights",
    "MaskConfig",
    "MaskPlan",
    "ModelConfig",
    "SequenceRecord",
    "SyntheticSpec",
    "TokenizedSample",
    "TokenizerModel",
    "TrainConfig",
    "Trainer",
    "init_weights",
    "__version__",
]
