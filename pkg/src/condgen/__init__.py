"""Conditioned dialogue generation with a single masked-attention transformer.

The stack works as encoder and decoder at once through self-attention masks;
condition-aware blocks add a position-wise condition bias via attention
routing. Training mixes labeled dialogues with labeled free text.
"""
from .data import Vocabulary, build_vocab, compute_tfidf
from .decoding import DecodeConfig, beam_search, generate_file
from .metrics import evaluate
from .model import Checkpoint, ConditionedTransformer, ModelConfig, load_checkpoint, save_checkpoint
from .training import Ablations, TrainConfig, train

__all__ = [
    "Ablations", "Checkpoint", "ConditionedTransformer", "DecodeConfig", "ModelConfig", "TrainConfig",
    "Vocabulary", "beam_search", "build_vocab", "compute_tfidf", "evaluate", "generate_file",
    "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"
