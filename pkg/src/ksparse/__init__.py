"""Saliency-driven top-K sparse attention with contrastive pretraining.

Desk-scale reference implementation with gradient checking, an analytic
FLOP model validated against runtime counters, and a synthetic
localized-anomaly benchmark.
"""

from .autodiff import AdamW, Tensor, backward, grad_check
from .attention import (AttentionMap, SaliencyState, build_saliency_state,
                        dense_attention, normalize_scores, select_topk,
                        sparse_attention)
from .config import RunConfig, parse_config
from .losses import ContrastBatch, info_nce, sparsity_loss, total_loss
from .model import Architecture, ModelParams, PatchGrid, init_params, partition_patches
from .synthdata import SynthSample, SynthSpec, generate, load_dataset, save_dataset
from .training import (AttnCache, AugmentSpec, evaluate, finetune_step, make_views,
                       pretrain_step, run_finetune, run_pretraining, snapshot_cache)

__version__ = "0.1.0"
