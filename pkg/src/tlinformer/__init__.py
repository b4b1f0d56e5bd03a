"""Windowed linear-attention language model on numpy.

Submodules: ``tensor`` (autodiff + cost ledger), ``attention``, ``model``,
``kv_cache``, ``cost``, ``training``, ``bench``, ``verify``, ``cli``.
"""

from .attention import AttentionPattern, attend, attention_core
from .cost import (
    baseline_cost,
    cost_cache_hit,
    cost_cache_miss,
    cost_cache_miss_closed_form,
    cost_sweep,
    memory_eval,
)
from .kv_cache import BaselineCacheStore, KVCacheStore, generate, generate_uncached, prefill, slide, step
from .model import (
    BaselineTransformer,
    ModelConfig,
    TLinFormer,
    WindowLayout,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import FlopLedger, Tensor, backward, ledger_read, ledger_reset, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttentionPattern",
    "BaselineCacheStore",
    "BaselineTransformer",
    "FlopLedger",
    "KVCacheStore",
    "ModelConfig",
    "TLinFormer",
    "Tensor",
    "WindowLayout",
    "attend",
    "attention_core",
    "backward",
    "baseline_cost",
    "build_model",
    "cost_cache_hit",
    "cost_cache_miss",
    "cost_cache_miss_closed_form",
    "cost_sweep",
    "generate",
    "generate_uncached",
    "ledger_read",
    "ledger_reset",
    "load_checkpoint",
    "memory_eval",
    "no_grad",
    "prefill",
    "save_checkpoint",
    "slide",
    "step",
]
