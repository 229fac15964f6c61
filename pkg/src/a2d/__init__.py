"""Attention-alignment knowledge distillation for encoder-decoder Transformers."""

from .data import BOS, EOS, PAD, UNK, Batch, ParallelCorpus, Vocab
from .distill import (AamParams, AlignmentModule, DistillConfig, aam_forward, aam_param_count,
                      attention_transfer_loss, total_loss, vanilla_kd_loss)
from .numerics import Tensor, backward, no_grad
from .transformer import AttentionMapSet, ModelConfig, Transformer, greedy_decode

__version__ = "0.1.0"
