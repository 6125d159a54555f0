"""Desk-scale relational video customization: a small two-branch
diffusion transformer with low-rank relation/subject adapters, trained
with mask-weighted denoising plus a space-time contrastive loss, and
analyzed through weight-subspace similarity and attention maps.
"""

from .analysis import (attention_map, feature_map, jacobi_eigh,
                       qkv_similarity_report, subspace_similarity, svd)
from .datagen import (DatasetEntry, RelationSpec, gen_video, read_dataset,
                      relation_accuracy, relation_oracle,
                      temporal_consistency, write_dataset)
from .errors import (BindingError, ConfigError, DataError, FormatError,
                     GraphError, NumericAbort, ShapeError, VocabError)
from .lora import (LoraAdapter, Selection, TripletConfig, apply_adapter,
                   inference_view, init_adapter, init_triplet, select_active)
from .masks import MaskSet, masked_loss, relation_mask, to_latent
from .model import (AttentionRecord, Denoiser, ModelConfig, NoiseSchedule,
                    diffusion_loss, patchify, unpatchify)
from .rcl import (BankEntry, MemoryBank, appearance_features,
                  dynamics_features, frame_differences, rcl_loss,
                  sample_contrast)
from .tensor import Tensor, grad_enabled, no_grad
from .train import (AdamW, Checkpoint, TrainConfig, Trainer, load_checkpoint,
                    sample, save_checkpoint, train)
from .vocab import decode, encode

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AttentionRecord", "BankEntry", "BindingError", "Checkpoint",
    "ConfigError", "DataError", "DatasetEntry", "Denoiser", "FormatError",
    "GraphError", "LoraAdapter", "MaskSet", "MemoryBank", "ModelConfig",
    "NoiseSchedule", "NumericAbort", "RelationSpec", "Selection",
    "ShapeError", "Tensor", "TrainConfig", "Trainer", "TripletConfig",
    "VocabError", "appearance_features", "apply_adapter", "attention_map",
    "decode", "diffusion_loss", "dynamics_features", "encode", "feature_map",
    "frame_differences", "gen_video", "grad_enabled", "inference_view",
    "init_adapter", "init_triplet", "jacobi_eigh", "load_checkpoint",
    "masked_loss", "no_grad", "patchify", "qkv_similarity_report",
    "rcl_loss", "read_dataset", "relation_accuracy", "relation_mask",
    "relation_oracle", "sample", "sample_contrast", "save_checkpoint",
    "select_active", "subspace_similarity", "svd", "temporal_consistency",
    "to_latent", "train", "unpatchify", "write_dataset",
]
