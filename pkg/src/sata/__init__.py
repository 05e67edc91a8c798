"""Vision Transformers that damp small attention weights, built on a NumPy autodiff engine."""

from .attention import AttentionConfig, MhsaParams, apply_attention, attention_weights, mhsa_forward, qkv_project
from .autodiff import Tape, Tensor, backward, finite_diff_check, no_grad
from .suppression import SataConfig, attention_stats, trivial_mask, twist, verify_mass_bound
from .vit import ModelState, ViTConfig, param_count, patch_embed, vit_forward

__all__ = [
    "AttentionConfig",
    "MhsaParams",
    "ModelState",
    "SataConfig",
    "Tape",
    "Tensor",
    "ViTConfig",
    "apply_attention",
    "attention_stats",
    "attention_weights",
    "backward",
    "finite_diff_check",
    "mhsa_forward",
    "no_grad",
    "param_count",
    "patch_embed",
    "qkv_project",
    "trivial_mask",
    "twist",
    "verify_mass_bound",
    "vit_forward",
]
