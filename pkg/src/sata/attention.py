"""Multi-head self-attention with optional temperature, diagonal masking and suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .suppression import SataConfig, suppress

DIAGONAL_LOGIT = -1e9


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int
    head_dim: int
    temperature_multiplier: float = 1.0
    lsa_diagonal_mask: bool = False
    lsa_learnable_temperature: bool = False

    def __post_init__(self):
        if self.num_heads < 1 or self.head_dim < 1:
            raise ConfigError(f"num_heads and head_dim must be positive, got {self.num_heads}, {self.head_dim}")
        if not self.temperature_multiplier > 0:
            raise ConfigError(f"temperature multiplier must be positive, got {self.temperature_multiplier}")

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def temperature(self) -> float:
        """Effective softmax temperature tau' / sqrt(D_h)."""
        return self.temperature_multiplier / math.sqrt(self.head_dim)

    @classmethod
    def for_embed_dim(cls, embed_dim: int, num_heads: int, **kw) -> "AttentionConfig":
        if num_heads < 1 or embed_dim % num_heads:
            raise ConfigError(f"embed dim {embed_dim} is not divisible by {num_heads} heads")
        return cls(num_heads=num_heads, head_dim=embed_dim // num_heads, **kw)


@dataclass
class MhsaParams:
    qkv_weight: Tensor  # D x 3*H*D_h, columns ordered [q | k | v], heads contiguous inside each
    proj_weight: Tensor  # H*D_h x D
    proj_bias: Tensor  # D
    log_temperature: Tensor | None = None
    sata_scale: Tensor | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {"qkv.weight": self.qkv_weight, "proj.weight": self.proj_weight, "proj.bias": self.proj_bias}
        if self.log_temperature is not None:
            out["log_temperature"] = self.log_temperature
        if self.sata_scale is not None:
            out["sata_scale"] = self.sata_scale
        return out

    @classmethod
    def initialize(
        cls,
        embed_dim: int,
        cfg: AttentionConfig,
        rng: np.random.Generator,
        *,
        std: float = 0.02,
        sata: SataConfig | None = None,
    ) -> "MhsaParams":
        inner = cfg.embed_dim
        log_t = None
        if cfg.lsa_learnable_temperature:
            log_t = Tensor(math.log(cfg.temperature), requires_grad=True)
        scale = None
        if sata is not None and sata.learnable_s:
            scale = Tensor(sata.s, requires_grad=True)
        return cls(
            qkv_weight=Tensor(rng.normal(0.0, std, (embed_dim, 3 * inner)), requires_grad=True),
            proj_weight=Tensor(rng.normal(0.0, std, (inner, embed_dim)), requires_grad=True),
            proj_bias=Tensor(np.zeros(embed_dim), requires_grad=True),
            log_temperature=log_t,
            sata_scale=scale,
        )


def qkv_project(z, params: MhsaParams, cfg: AttentionConfig) -> tuple[Tensor, Tensor, Tensor]:
    """One linear map, then split into per-head q, k, v of shape (..., H, N, D_h)."""
    z = ad.as_tensor(z)
    d = z.shape[-1]
    if d % cfg.num_heads:
        raise ConfigError(f"embed dim {d} is not divisible by {cfg.num_heads} heads")
    if params.qkv_weight.shape != (d, 3 * cfg.embed_dim):
        raise ConfigError(
            f"qkv weight {params.qkv_weight.shape} does not map dim {d} to 3 x {cfg.num_heads} x {cfg.head_dim}"
        )
    lead, n = z.shape[:-2], z.shape[-2]
    qkv = ad.linear(z, params.qkv_weight).reshape(lead + (n, 3, cfg.num_heads, cfg.head_dim))
    k_ = len(lead)
    # (..., N, 3, H, Dh) -> (3, ..., H, N, Dh)
    axes = (k_ + 1,) + tuple(range(k_)) + (k_ + 2, k_, k_ + 3)
    qkv = ad.transpose(qkv, axes)
    return qkv[0], qkv[1], qkv[2]


def attention_weights(q, k, cfg: AttentionConfig, log_temperature: Tensor | None = None) -> Tensor:
    """Row-stochastic attention softmax(tau * q k^T) per head."""
    q, k = ad.as_tensor(q), ad.as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"q {q.shape} and k {k.shape} disagree on head dim")
    logits = ad.matmul(q, ad.swap_last(k))
    if cfg.lsa_diagonal_mask:
        n = logits.shape[-1]
        logits = ad.masked_fill(logits, np.eye(n, dtype=bool), DIAGONAL_LOGIT)
    if cfg.lsa_learnable_temperature:
        if log_temperature is None:
            raise ConfigError("learnable temperature enabled but no log-temperature parameter given")
        return ad.softmax_rows(logits, ad.exp(log_temperature))
    return ad.softmax_rows(logits, cfg.temperature)


def apply_attention(A, v) -> Tensor:
    A, v = ad.as_tensor(A), ad.as_tensor(v)
    if A.shape[-1] != v.shape[-2]:
        raise DimensionError(f"attention {A.shape} cannot weight values {v.shape}")
    return ad.matmul(A, v)


@dataclass
class AttentionTrace:
    """Intermediate attention of one layer, captured for reporting."""

    weights: np.ndarray
    mask: np.ndarray | None
    suppressed: np.ndarray
    scale: float | None


def mhsa_forward(
    z,
    params: MhsaParams,
    cfg: AttentionConfig,
    sata: SataConfig | None = None,
    trace: list | None = None,
) -> Tensor:
    """Full attention block: project, attend, optionally suppress, merge heads, project out."""
    z = ad.as_tensor(z)
    q, k, v = qkv_project(z, params, cfg)
    A = attention_weights(q, k, cfg, params.log_temperature)
    mask = None
    scale = None
    A_used = A
    if sata is not None:
        scale = params.sata_scale if (sata.learnable_s and params.sata_scale is not None) else sata.s
        A_used, mask = suppress(A, sata, scale)
    if trace is not None:
        s_val = None if scale is None else float(np.asarray(ad.as_tensor(scale).data))
        trace.append(AttentionTrace(A.data.copy(), mask, A_used.data.copy(), s_val))
    heads = apply_attention(A_used, v)  # (..., H, N, Dh)
    nd = heads.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    merged = ad.transpose(heads, axes).reshape(z.shape[:-1] + (cfg.embed_dim,))
    return ad.linear(merged, params.proj_weight, params.proj_bias)
