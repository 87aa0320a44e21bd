"""Lossless compressed memory attention (LoMA) at desk scale."""

from .kernels import BACKEND as KERNEL_BACKEND
from .model import KvCache, Model, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .structuring import (
    LomaParams,
    StructuredSample,
    Zone,
    build_chunk_mask,
    build_position_ids,
    build_sample,
    build_sample_mask,
)
from .tokenizer import VOCAB, Corpus, SyntheticCorpus, plan_lengths, tokenize

__all__ = [
    "KERNEL_BACKEND",
    "VOCAB",
    "Corpus",
    "KvCache",
    "LomaParams",
    "Model",
    "ModelConfig",
    "StructuredSample",
    "SyntheticCorpus",
    "Zone",
    "build_chunk_mask",
    "build_position_ids",
    "build_sample",
    "build_sample_mask",
    "init_model",
    "load_checkpoint",
    "plan_lengths",
    "save_checkpoint",
    "tokenize",
]
