"""Transformers with QKV, symmetric KV and KV+Pos self-attention, on a numpy autodiff core."""
from .attention import AttentionKind, AttentionLayer, CostReport, count_cost
from .model import ModelConfig, TransformerModel, generate, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttentionKind", "AttentionLayer", "CostReport", "count_cost",
    "ModelConfig", "TransformerModel", "generate", "load_checkpoint", "save_checkpoint",
    "Tensor", "no_grad",
]
